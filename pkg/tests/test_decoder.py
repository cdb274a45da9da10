import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp as sp_logsumexp
from scipy.stats import norm

from vsrlab import hmm
from vsrlab.decoder import DecodeConfig, DecodeGraph, decode, decode_frames
from vsrlab.errors import EmptyBeamError, OovError
from vsrlab.lingware import Lexicon, fit_bigram


def _model(phone_means, kind="skip2", use_sil=False, var=0.25, n_mix=1):
    """Single-dimension model; state s of a phone sits at base + 0.5 * s."""
    names = sorted(phone_means)
    if use_sil and "sil" not in names:
        raise ValueError("sil mean required")
    topologies = [hmm.build_topology(kind) for _ in names]
    states = []
    for name, topo in zip(names, topologies):
        phone_states = []
        for s in range(topo.n_states):
            mu = phone_means[name] + 0.5 * s
            if n_mix == 1:
                means = np.array([[mu]])
                weights = np.array([1.0])
            else:
                means = np.array([[mu - 0.4], [mu + 0.4]])
                weights = np.array([0.6, 0.4])
            phone_states.append(hmm.GmmState(weights, means,
                                             np.full((n_mix, 1), var)))
        states.append(phone_states)
    return hmm.OpticalModel(phones=names, dim=1, topologies=topologies,
                            states=states, var_floor=np.full(1, 1e-10),
                            use_sil=use_sil)


def _lexicon():
    lex = Lexicon()
    lex.add("ba", ["p"])
    lex.add("do", ["t"])
    lex.add("ga", ["k"])
    return lex


def _lm():
    return fit_bigram([["ba"], ["do", "ga"], ["ba", "do"], ["ga"], ["do"]])


# ---------------------------------------------------------------------------
# reference decoder: enumerate word sequences, score each with a dense
# Viterbi written with plain loops and scipy densities

def _state_logpdf(model, pid, s, x):
    st = model.states[pid][s]
    comps = [math.log(st.weights[m])
             + norm.logpdf(x, st.means[m, 0], math.sqrt(st.variances[m, 0]))
             for m in range(st.weights.shape[0])]
    return float(sp_logsumexp(comps))


def _sentence_acoustic(model, lex, sentence, frames):
    phones = []
    for word in sentence:
        phones.extend(lex.canonical(word))
    if model.use_sil:
        phones = ["sil"] + phones + ["sil"]
    pids = [model.phone_index[p] for p in phones]
    sizes = [model.topologies[pid].n_states for pid in pids]
    bases = [0]
    for n in sizes[:-1]:
        bases.append(bases[-1] + n)
    s_count = sum(sizes)
    trans = np.zeros((s_count, s_count))
    exit_p = np.zeros(s_count)
    for pos, pid in enumerate(pids):
        topo = model.topologies[pid]
        n = topo.n_states
        for s in range(n):
            for c in range(n):
                trans[bases[pos] + s, bases[pos] + c] = topo.trans[s, c]
            p_final = topo.trans[s, n]
            if pos + 1 < len(pids):
                trans[bases[pos] + s, bases[pos + 1]] += p_final
            else:
                exit_p[bases[pos] + s] = p_final
    n_frames = frames.shape[0]
    emis = np.empty((n_frames, s_count))
    for j in range(s_count):
        pos = max(i for i, b in enumerate(bases) if b <= j)
        pid = pids[pos]
        s = j - bases[pos]
        for t in range(n_frames):
            emis[t, j] = _state_logpdf(model, pid, s, frames[t, 0])

    v = [-math.inf] * s_count
    v[0] = emis[0, 0]
    for t in range(1, n_frames):
        nv = [-math.inf] * s_count
        for j in range(s_count):
            best = -math.inf
            for i in range(s_count):
                if trans[i, j] > 0.0 and v[i] > -math.inf:
                    c = v[i] + math.log(trans[i, j])
                    if c > best:
                        best = c
            if best > -math.inf:
                nv[j] = best + emis[t, j]
        v = nv
    best = -math.inf
    for j in range(s_count):
        if exit_p[j] > 0.0 and v[j] > -math.inf:
            best = max(best, v[j] + math.log(exit_p[j]))
    return best


def _oracle_decode(model, lm, lex, frames, cfg, max_words=3):
    scored = []
    vocab = lex.words
    for n in range(1, max_words + 1):
        for sentence in itertools.product(vocab, repeat=n):
            acoustic = _sentence_acoustic(model, lex, sentence, frames)
            if acoustic == -math.inf:
                continue
            lm_term = lm.score(list(sentence))
            total = acoustic + cfg.lm_scale * lm_term \
                + cfg.word_insertion_penalty * n
            scored.append((total, sentence))
    assert scored, "no sentence fits the frame count"
    scored.sort(key=lambda item: (-item[0], item[1]))
    return scored


def _random_instance(rng, use_sil, n_mix=1):
    means = {"p": 0.0, "t": 4.0, "k": -4.0}
    if use_sil:
        means["sil"] = 10.0
    model = _model(means, use_sil=use_sil, n_mix=n_mix)
    lex = _lexicon()
    lm = _lm()
    n_words = int(rng.integers(1, 4))
    sentence = [lex.words[int(rng.integers(3))] for _ in range(n_words)]
    segments = []
    if use_sil:
        segments.append(10.0)
    for word in sentence:
        segments.append(means[lex.canonical(word)[0]])
    if use_sil:
        segments.append(10.0)
    budget = 8 - len(segments)
    lengths = [1] * len(segments)
    for _ in range(int(rng.integers(0, budget + 1))):
        lengths[int(rng.integers(len(segments)))] += 1
    frames = np.concatenate([
        rng.normal(mu, 0.4, size=(n, 1))
        for mu, n in zip(segments, lengths)
    ])
    cfg = DecodeConfig(lm_scale=float(rng.choice([2.0, 5.0])),
                       word_insertion_penalty=float(rng.choice([0.0, -0.7])),
                       beam=None)
    return model, lm, lex, frames, cfg


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(lm_scale=0.0)
        with pytest.raises(ValueError):
            DecodeConfig(lm_scale=-3.0)
        with pytest.raises(ValueError):
            DecodeConfig(beam=0.0)
        DecodeConfig(beam=None)
        assert DecodeConfig().beam == 200.0
        assert DecodeConfig().lm_scale == 10.0
        assert DecodeConfig().word_insertion_penalty == 0.0

    def test_oov_word_rejected(self):
        model = _model({"p": 0.0, "t": 4.0, "k": -4.0})
        lex = _lexicon()
        lex.add("zumo", ["t"])
        with pytest.raises(OovError):
            DecodeGraph(model, _lm(), lex)


class TestExactness:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(71)
        for trial in range(10):
            model, lm, lex, frames, cfg = _random_instance(rng, use_sil=False)
            result = decode(model, lm, lex, frames, cfg)
            scored = _oracle_decode(model, lm, lex, frames, cfg)
            assert result.score == pytest.approx(scored[0][0], abs=1e-9)
            if len(scored) == 1 or scored[0][0] - scored[1][0] > 1e-6:
                assert tuple(result.words) == scored[0][1]

    def test_matches_enumeration_with_silence(self):
        rng = np.random.default_rng(72)
        for trial in range(6):
            model, lm, lex, frames, cfg = _random_instance(rng, use_sil=True)
            result = decode(model, lm, lex, frames, cfg)
            scored = _oracle_decode(model, lm, lex, frames, cfg)
            assert result.score == pytest.approx(scored[0][0], abs=1e-9)
            if len(scored) == 1 or scored[0][0] - scored[1][0] > 1e-6:
                assert tuple(result.words) == scored[0][1]

    def test_matches_enumeration_two_mixtures(self):
        rng = np.random.default_rng(73)
        for trial in range(4):
            model, lm, lex, frames, cfg = _random_instance(rng, use_sil=False,
                                                           n_mix=2)
            result = decode(model, lm, lex, frames, cfg)
            scored = _oracle_decode(model, lm, lex, frames, cfg)
            assert result.score == pytest.approx(scored[0][0], abs=1e-9)

    def test_single_frame_hand_score(self):
        # T=1: pick the word maximizing emission + scaled start/end bigram
        model = _model({"p": 0.0, "t": 4.0, "k": -4.0})
        lm = _lm()
        lex = _lexicon()
        cfg = DecodeConfig(lm_scale=3.0, word_insertion_penalty=-0.2, beam=None)
        frames = np.array([[3.7]])
        result = decode(model, lm, lex, frames, cfg)
        candidates = {}
        for word in lex.words:
            pid = model.phone_index[lex.canonical(word)[0]]
            emis = hmm.state_log_likelihoods(model, frames)[0, model.state_offset(pid)]
            # single frame: enter state 0, exit directly (skip arc, p=1/3)
            candidates[word] = emis + math.log(1.0 / 3.0) \
                + 3.0 * (lm.logp(word, "<s>") + lm.logp("</s>", word)) - 0.2
        best = max(sorted(candidates), key=lambda w: candidates[w])
        assert result.words == [best] == ["do"]
        assert result.score == pytest.approx(candidates[best], abs=1e-10)


class TestTieBreak:
    def test_homophones_pick_lexicographic_smaller(self):
        model = _model({"t": 0.0})
        lex = Lexicon()
        lex.add("dos", ["t"])
        lex.add("tos", ["t"])
        lm = fit_bigram([["dos"], ["tos"]])
        frames = np.zeros((4, 1))
        result = decode(model, lm, lex, frames,
                        DecodeConfig(lm_scale=1.0, beam=None))
        assert result.words == ["dos"]


class TestBeam:
    def test_tight_beam_starves_termination(self):
        # greedy emissions favour staying in state 0, but the only legal
        # 3-frame path must advance every frame
        model = _model({"p": 0.0}, kind="classic3")
        lex = Lexicon()
        lex.add("ba", ["p"])
        lm = fit_bigram([["ba"]])
        frames = np.array([[0.0], [0.0], [0.0]])
        exact = decode(model, lm, lex, frames, DecodeConfig(lm_scale=1.0, beam=None))
        assert exact.words == ["ba"]
        with pytest.raises(EmptyBeamError):
            decode(model, lm, lex, frames,
                   DecodeConfig(lm_scale=1.0, beam=1e-4))

    def test_wide_beam_matches_exact(self):
        rng = np.random.default_rng(74)
        model, lm, lex, frames, _ = _random_instance(rng, use_sil=True)
        cfg_exact = DecodeConfig(lm_scale=4.0, beam=None)
        cfg_beam = DecodeConfig(lm_scale=4.0, beam=1e6)
        a = decode(model, lm, lex, frames, cfg_exact)
        b = decode(model, lm, lex, frames, cfg_beam)
        assert a.words == b.words
        assert a.score == pytest.approx(b.score, abs=1e-12)

    def test_beam_scores_monotone_in_width(self):
        rng = np.random.default_rng(77)
        model, lm, lex, frames, _ = _random_instance(rng, use_sil=True)
        scores = []
        for beam in (2.0, 10.0, 50.0, None):
            try:
                scores.append(decode(model, lm, lex, frames,
                                     DecodeConfig(lm_scale=4.0, beam=beam)).score)
            except EmptyBeamError:
                scores.append(-np.inf)
        for narrow, wide in zip(scores, scores[1:]):
            assert narrow <= wide + 1e-12

    def test_too_few_frames(self):
        model = _model({"p": 0.0, "t": 4.0, "k": -4.0, "sil": 10.0},
                       use_sil=True)
        lex = _lexicon()
        # two frames cannot cover lead silence, one word, tail silence
        with pytest.raises(EmptyBeamError):
            decode(model, _lm(), lex, np.zeros((2, 1)))


class TestResult:
    def test_spans_partition_frames(self):
        model = _model({"p": 0.0, "t": 4.0, "k": -4.0, "sil": 10.0},
                       use_sil=True)
        lex = _lexicon()
        lm = _lm()
        frames = np.concatenate([
            np.full((3, 1), 10.0),   # lead silence
            np.full((4, 1), 0.25),   # "ba"
            np.full((5, 1), 4.25),   # "do"
            np.full((3, 1), 10.0),   # tail silence
        ])
        result = decode(model, lm, lex, frames,
                        DecodeConfig(lm_scale=1.0, beam=None))
        assert result.words == ["ba", "do"]
        # spans partition all frames; boundary silence folds into the words
        assert result.word_spans[0][1] == 0
        assert result.word_spans[-1][2] == 15
        for (_, _, end), (_, start, _) in zip(result.word_spans,
                                              result.word_spans[1:]):
            assert end == start
        assert result.word_spans[0][0] == "ba"
        assert result.word_spans[1][0] == "do"
        # the word boundary falls inside the acoustic change
        assert 5 <= result.word_spans[0][2] <= 9

    def test_emission_shift_keeps_argmax(self):
        rng = np.random.default_rng(75)
        model, lm, lex, frames, cfg = _random_instance(rng, use_sil=False)
        emis = hmm.state_log_likelihoods(model, frames)
        shift = rng.normal(size=(emis.shape[0], 1))
        graph = DecodeGraph(model, lm, lex)
        a = decode_frames(graph, frames, cfg, emissions=emis)
        b = decode_frames(graph, frames, cfg, emissions=emis + shift)
        assert a.words == b.words
        assert b.score == pytest.approx(a.score + shift.sum(), abs=1e-9)

    def test_deterministic_and_graph_reuse(self):
        rng = np.random.default_rng(76)
        model, lm, lex, frames, cfg = _random_instance(rng, use_sil=True)
        graph = DecodeGraph(model, lm, lex)
        a = decode_frames(graph, frames, cfg)
        b = decode_frames(graph, frames, cfg)
        c = decode(model, lm, lex, frames, cfg)
        assert a.words == b.words == c.words
        assert a.score == b.score == c.score
        assert a.word_spans == b.word_spans == c.word_spans
