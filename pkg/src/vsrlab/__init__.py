"""Visual speech recognition laboratory: synthetic corpora, lip feature
extraction, GMM-HMM training, and bigram Viterbi decoding."""

__version__ = "0.1.0"
