"""Command line front door.

Subcommands cover every pipeline stage plus the full results grid. Usage
errors exit with status 2 (argparse's default); pipeline failures print a
diagnostic naming the failing stage and exit with status 1.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__, autoencoder, corpus, decoder, eigenlips, \
    experiment, features, frontend, geometric, hmm, lingware, scoring
from .errors import VsrError

log = logging.getLogger(__name__)


def _args_hash(args, skip=("func", "out", "out_dir", "corpus_dir", "in_dirs",
                           "feat_dir", "roi_dir", "model", "lm", "lexicon",
                           "ref", "hyp", "pca", "ae", "config", "json_out")):
    payload = {k: str(v) for k, v in sorted(vars(args).items())
               if k not in skip}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _feature_files(directory):
    paths = sorted(Path(directory).glob("*.vfa"))
    if not paths:
        raise VsrError(f"no .vfa feature files in {directory}")
    return paths


def _load_dir(directory):
    return [features.load_features(p) for p in _feature_files(directory)]


# ---------------------------------------------------------------------------
# subcommand bodies

def cmd_synth_corpus(args):
    lexicon = corpus.default_lexicon(n_words=args.words, seed=args.seed)
    per_speaker = None
    if args.utterances_per_speaker:
        per_speaker = [int(c) for c in args.utterances_per_speaker.split(",")]
    spec = corpus.SynthSpec(lexicon=lexicon, n_speakers=args.speakers,
                            n_utterances=args.utterances, seed=args.seed,
                            utterances_per_speaker=per_speaker)
    corpus.synthesize_corpus(spec, args.out_dir)
    print(f"wrote corpus with {args.speakers} speakers to {args.out_dir}")
    return 0


def _per_utterance_stage(args, stage_name, records, build_one, inputs_of,
                         params):
    """Run a cached per-utterance stage for a standalone subcommand."""
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = experiment.Runner(_args_hash(args))
    for record in records:
        out = out_dir / f"{record.utterance_id}.vfa"
        runner.stage(stage_name, inputs_of(record), params, [out],
                     lambda record=record, out=out: build_one(record, out))
    print(f"{stage_name}: {len(records)} utterances in {out_dir}")
    return 0


def cmd_extract_roi(args):
    records = corpus.load_manifest(Path(args.corpus_dir) / "manifest.tsv")

    def build(record, out):
        landmarks = corpus.read_landmarks(record.landmark_path)
        images = corpus.read_frames(record.frames_path)
        rois = frontend.roi_sequence(landmarks, images, margin=args.margin)
        features.save_features(out, features.FeatureSequence(
            frames=rois.reshape(rois.shape[0], -1),
            utterance_id=record.utterance_id, speaker_id=record.speaker_id,
            stream_tag="roi"))

    return _per_utterance_stage(
        args, "roi", records, build,
        lambda r: [r.landmark_path, r.frames_path], {"margin": args.margin})


def cmd_feat_geo(args):
    records = corpus.load_manifest(Path(args.corpus_dir) / "manifest.tsv")

    def build(record, out):
        landmarks = corpus.read_landmarks(record.landmark_path)
        features.save_features(out, features.FeatureSequence(
            frames=geometric.geometric_sequence(landmarks),
            utterance_id=record.utterance_id, speaker_id=record.speaker_id,
            stream_tag="geo"))

    return _per_utterance_stage(args, "geo", records, build,
                                lambda r: [r.landmark_path], {})


def cmd_train_pca(args):
    rois = [seq.frames for seq in _load_dir(args.roi_dir)]
    sample = experiment.subsample_rows(rois, args.max_frames)
    model = eigenlips.fit_pca(sample, args.components)
    eigenlips.save_pca(args.out, model)
    experiment.write_stamp(args.out, "pca", _args_hash(args), _args_hash(args))
    print(f"pca: {args.components} components from {sample.shape[0]} frames "
          f"-> {args.out}")
    return 0


def cmd_feat_eig(args):
    model = eigenlips.load_pca(args.pca)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for path in _feature_files(args.roi_dir):
        roi = features.load_features(path)
        out = out_dir / path.name
        features.save_features(out, features.FeatureSequence(
            frames=eigenlips.project(model, roi.frames),
            utterance_id=roi.utterance_id, speaker_id=roi.speaker_id,
            stream_tag="eig"))
        experiment.write_stamp(out, "eig", _args_hash(args), _args_hash(args))
        n += 1
    print(f"eig: {n} utterances in {out_dir}")
    return 0


def cmd_train_ae(args):
    rois = [seq.frames for seq in _load_dir(args.roi_dir)]
    sample = experiment.subsample_rows(rois, args.max_frames)
    h, w = autoencoder.DEFAULT_INPUT_HW
    channels = tuple(int(c) for c in args.channels.split(","))
    net = autoencoder.ConvAutoencoder(channels=channels,
                                      bottleneck=args.bottleneck,
                                      seed=args.seed)
    net.train(sample.reshape(-1, h, w), epochs=args.epochs, lr=args.lr,
              batch_size=args.batch, seed=args.seed)
    autoencoder.save_autoencoder(args.out, net)
    experiment.write_stamp(args.out, "ae", _args_hash(args), _args_hash(args))
    print(f"ae: trained {args.epochs} epochs on {sample.shape[0]} frames "
          f"-> {args.out}")
    return 0


def cmd_feat_dnn(args):
    net = autoencoder.load_autoencoder(args.ae)
    h, w = net.input_hw
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for path in _feature_files(args.roi_dir):
        roi = features.load_features(path)
        out = out_dir / path.name
        features.save_features(out, features.FeatureSequence(
            frames=net.encode(roi.frames.reshape(-1, h, w)),
            utterance_id=roi.utterance_id, speaker_id=roi.speaker_id,
            stream_tag="dnn"))
        experiment.write_stamp(out, "dnn", _args_hash(args), _args_hash(args))
        n += 1
    print(f"dnn: {n} utterances in {out_dir}")
    return 0


def cmd_post(args):
    streams = [_load_dir(d) for d in args.in_dirs]
    ids = [s.utterance_id for s in streams[0]]
    for other in streams[1:]:
        if [s.utterance_id for s in other] != ids:
            raise VsrError("input directories hold different utterance sets")
    processed = []
    for seqs in streams:
        seqs = features.zscore_normalize(seqs, args.norm)
        if args.context > 0:
            seqs = [features.add_deltas(s, args.context) for s in seqs]
        processed.append(seqs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, utt in enumerate(ids):
        combined = features.combine_streams([p[i] for p in processed])
        out = out_dir / f"{utt}.vfa"
        features.save_features(out, combined)
        experiment.write_stamp(out, "post", _args_hash(args), _args_hash(args))
    print(f"post: {len(ids)} utterances ({args.norm}, context {args.context}) "
          f"in {out_dir}")
    return 0


def _records_and_features(args):
    records = corpus.load_manifest(Path(args.corpus_dir) / "manifest.tsv")
    if args.utterances:
        wanted = set(Path(args.utterances).read_text(encoding="utf-8").split())
        records = [r for r in records if r.utterance_id in wanted]
        if not records:
            raise VsrError("utterance list matches nothing in the manifest")
    seqs = []
    for record in records:
        path = Path(args.feat_dir) / f"{record.utterance_id}.vfa"
        seqs.append(features.load_features(path))
    return records, seqs


def cmd_train_hmm(args):
    records, seqs = _records_and_features(args)
    lexicon = lingware.load_lexicon(Path(args.corpus_dir) / "lexicon.txt")
    data = [(seq.frames, hmm.phone_chain(lexicon, record.transcript))
            for seq, record in zip(seqs, records)]
    phones = sorted(lexicon.phone_set())
    model = hmm.flat_start([frames for frames, _ in data], phones,
                           topology_kind=args.topology)
    schedule = experiment.parse_schedule(args.schedule)
    history = hmm.train_em(model, data, schedule=schedule)
    hmm.save_model(args.out, model)
    experiment.write_stamp(args.out, "hmm", _args_hash(args), _args_hash(args))
    for target_m, ll in history:
        print(f"M={target_m} loglik={ll:.4f}")
    print(f"hmm: {len(records)} utterances -> {args.out}")
    return 0


def cmd_align(args):
    records, seqs = _records_and_features(args)
    lexicon = lingware.load_lexicon(Path(args.corpus_dir) / "lexicon.txt")
    model = hmm.load_model(args.model)
    lines = []
    for record, seq in zip(records, seqs):
        chain = hmm.phone_chain(lexicon, record.transcript,
                                use_sil=model.use_sil)
        alignment = hmm.forced_align(model, seq.frames, chain)
        for phone, start, end in hmm.phone_spans(alignment):
            lines.append(f"{record.utterance_id}\t{phone}\t{start}\t{end}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    experiment.write_stamp(args.out, "align", _args_hash(args), _args_hash(args))
    print(f"align: {len(records)} utterances -> {args.out}")
    return 0


def cmd_decode(args):
    model = hmm.load_model(args.model)
    lm = lingware.load_lm(args.lm)
    lexicon = lingware.load_lexicon(args.lexicon)
    beam = None if args.beam.lower() in ("none", "inf") else float(args.beam)
    config = decoder.DecodeConfig(lm_scale=args.lm_scale,
                                  word_insertion_penalty=args.wip, beam=beam)
    graph = decoder.DecodeGraph(model, lm, lexicon)
    hyps = {}
    for seq in _load_dir(args.feat_dir):
        result = decoder.decode_frames(graph, seq.frames, config)
        hyps[seq.utterance_id] = result.words
    scoring.save_transcripts(args.out, hyps)
    experiment.write_stamp(args.out, "decode", _args_hash(args), _args_hash(args))
    print(f"decode: {len(hyps)} utterances -> {args.out}")
    return 0


def cmd_score(args):
    refs = scoring.load_transcripts(args.ref)
    hyps = scoring.load_transcripts(args.hyp)
    report = scoring.evaluate(refs, hyps, n_resamples=args.bootstrap,
                              seed=args.seed, confidence=args.confidence)
    if args.json_out:
        Path(args.json_out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.format_line())
    return 0


def cmd_run_grid(args):
    mapping = experiment.read_config_file(args.config)
    if args.out_dir:
        mapping["out_dir"] = args.out_dir
    cfg = experiment.ExperimentConfig.from_mapping(mapping)
    if not cfg.raw["corpus_dir"]:
        raise VsrError("config must set corpus_dir")
    if not cfg.raw["out_dir"]:
        raise VsrError("config must set out_dir (or pass --out-dir)")
    experiment.run_grid(cfg, jobs=args.jobs)
    print((cfg.out_dir / "results.md").read_text(encoding="utf-8"), end="")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="vsrlab", description="visual speech recognition laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=5)
    p.add_argument("--utterances", type=int, default=240,
                   help="total utterance count")
    p.add_argument("--words", type=int, default=20, help="vocabulary size")
    p.add_argument("--utterances-per-speaker", default="",
                   help="explicit comma-separated per-speaker counts")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("extract-roi", help="aligned mouth ROIs per utterance")
    p.add_argument("--margin", type=float, default=frontend.DEFAULT_MARGIN)
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_extract_roi)

    p = sub.add_parser("feat-geo", help="geometric lip features")
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_feat_geo)

    p = sub.add_parser("train-pca", help="fit the eigenlip basis")
    p.add_argument("--components", type=int, default=32)
    p.add_argument("--max-frames", type=int, default=320)
    p.add_argument("roi_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_train_pca)

    p = sub.add_parser("feat-eig", help="project ROIs onto the eigenlip basis")
    p.add_argument("pca")
    p.add_argument("roi_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_feat_eig)

    p = sub.add_parser("train-ae", help="train the convolutional autoencoder")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--bottleneck", type=int, default=32)
    p.add_argument("--channels", default="8,16,32")
    p.add_argument("--max-frames", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("roi_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("feat-dnn", help="bottleneck codes from the autoencoder")
    p.add_argument("ae")
    p.add_argument("roi_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_feat_dnn)

    p = sub.add_parser("post", help="normalize, add deltas, combine streams")
    p.add_argument("--norm", choices=("speaker", "utterance"),
                   default="speaker")
    p.add_argument("--context", type=int, default=0,
                   help="delta context; 0 keeps statics only")
    p.add_argument("out_dir")
    p.add_argument("in_dirs", nargs="+")
    p.set_defaults(func=cmd_post)

    p = sub.add_parser("train-hmm", help="embedded GMM-HMM training")
    p.add_argument("--topology", choices=("classic3", "skip2"),
                   default="skip2")
    p.add_argument("--schedule", default="1:4,2:4,4:4,8:4")
    p.add_argument("--utterances", default="",
                   help="file listing utterance ids to train on")
    p.add_argument("corpus_dir")
    p.add_argument("feat_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_train_hmm)

    p = sub.add_parser("align", help="forced phone alignment")
    p.add_argument("--utterances", default="")
    p.add_argument("model")
    p.add_argument("corpus_dir")
    p.add_argument("feat_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("decode", help="bigram Viterbi decoding")
    p.add_argument("--lm-scale", type=float, default=10.0)
    p.add_argument("--wip", type=float, default=0.0,
                   help="word insertion penalty")
    p.add_argument("--beam", default="200.0",
                   help="log-domain beam width, or 'none' for exact search")
    p.add_argument("model")
    p.add_argument("lm")
    p.add_argument("lexicon")
    p.add_argument("feat_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="word error rate with bootstrap interval")
    p.add_argument("--bootstrap", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--json-out", default="")
    p.add_argument("ref")
    p.add_argument("hyp")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run-grid", help="full stream x context x norm grid")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="",
                   help="override the out_dir config key")
    p.add_argument("config")
    p.set_defaults(func=cmd_run_grid)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (VsrError, ValueError, OSError) as exc:
        print(f"vsrlab {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
