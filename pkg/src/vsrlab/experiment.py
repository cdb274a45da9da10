"""Experiment orchestration: flat key=value configuration, artifact
stamping, content-hash stage caching, and the end-to-end results grid
(7 feature streams x 4 delta contexts x 2 normalizations).

Every artifact gets a ``<name>.meta.json`` sidecar carrying the tool
version, the semantic config hash, the stage name, and a stage key derived
from the input digests and stage parameters. A stage whose outputs all
exist with matching keys is skipped, so re-running after deleting only the
decode outputs re-decodes without retraining.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, autoencoder, corpus, decoder, eigenlips, features, \
    frontend, geometric, hmm, lingware, scoring
from .errors import DegenerateSplitError, FormatError

log = logging.getLogger(__name__)

GRID_STREAMS = ("geo", "eig", "dnn", "geo+eig", "geo+dnn", "eig+dnn",
                "geo+eig+dnn")
BASE_STREAMS = ("geo", "eig", "dnn")
CONTEXT_LABELS = {0: "raw", 1: "dd1", 2: "dd2", 3: "dd3"}

CONFIG_DEFAULTS = {
    "seed": "0",
    "corpus_dir": "",
    "out_dir": "",
    "test_speakers": "",
    "streams": ",".join(GRID_STREAMS),
    "contexts": "0,1,2,3",
    "norms": "speaker,utterance",
    "roi_margin": "0.15",
    "pca_components": "32",
    "pca_max_frames": "320",
    "ae_channels": "8,16,32",
    "ae_bottleneck": "32",
    "ae_epochs": "30",
    "ae_lr": "1e-3",
    "ae_batch": "32",
    "ae_max_frames": "4000",
    "topology": "skip2",
    "schedule": "1:4,2:4,4:4,8:4",
    "lm_scale": "10.0",
    "word_insertion_penalty": "0.0",
    "beam": "200.0",
    "bootstrap": "1000",
    "confidence": "0.95",
}

# paths do not affect results, so they stay out of the semantic hash
_PATH_KEYS = ("corpus_dir", "out_dir")


# ---------------------------------------------------------------------------
# configuration

def read_config_file(path):
    """Flat ``key=value`` file with ``#`` comments and ``include <path>``."""
    return _read_config(Path(path), set())


def _read_config(path, seen):
    path = path.resolve()
    if path in seen:
        raise FormatError(f"{path}: include cycle")
    seen.add(path)
    out = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("include "):
            target = line[len("include "):].strip()
            out.update(_read_config(path.parent / target, seen))
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _csv(value):
    return [item.strip() for item in value.split(",") if item.strip()]


def parse_schedule(value):
    out = []
    for item in _csv(value):
        if ":" not in item:
            raise ValueError(f"schedule entry {item!r} must look like M:iters")
        m, iters = item.split(":", 1)
        out.append((int(m), int(iters)))
    if not out:
        raise ValueError("schedule must not be empty")
    for (m0, _), (m1, _) in zip(out, out[1:]):
        if m1 < m0:
            raise ValueError("mixture schedule must be non-decreasing")
    if any(m < 1 or it < 1 for m, it in out):
        raise ValueError("schedule entries must be positive")
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int = 0
    corpus_dir: Path = Path()
    out_dir: Path = Path()
    test_speakers: list = field(default_factory=list)
    streams: list = field(default_factory=list)
    contexts: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    roi_margin: float = 0.15
    pca_components: int = 32
    pca_max_frames: int = 320
    ae_channels: tuple = (8, 16, 32)
    ae_bottleneck: int = 32
    ae_epochs: int = 30
    ae_lr: float = 1e-3
    ae_batch: int = 32
    ae_max_frames: int = 4000
    topology: str = "skip2"
    schedule: list = field(default_factory=list)
    lm_scale: float = 10.0
    word_insertion_penalty: float = 0.0
    beam: float | None = 200.0
    bootstrap: int = 1000
    confidence: float = 0.95

    @classmethod
    def from_mapping(cls, mapping):
        merged = dict(CONFIG_DEFAULTS)
        for key, value in mapping.items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = value
        beam_raw = merged["beam"].lower()
        beam = None if beam_raw in ("", "none", "inf") else float(merged["beam"])
        cfg = cls(
            raw=merged,
            seed=int(merged["seed"]),
            corpus_dir=Path(merged["corpus_dir"]),
            out_dir=Path(merged["out_dir"]),
            test_speakers=_csv(merged["test_speakers"]),
            streams=_csv(merged["streams"]),
            contexts=[int(c) for c in _csv(merged["contexts"])],
            norms=_csv(merged["norms"]),
            roi_margin=float(merged["roi_margin"]),
            pca_components=int(merged["pca_components"]),
            pca_max_frames=int(merged["pca_max_frames"]),
            ae_channels=tuple(int(c) for c in _csv(merged["ae_channels"])),
            ae_bottleneck=int(merged["ae_bottleneck"]),
            ae_epochs=int(merged["ae_epochs"]),
            ae_lr=float(merged["ae_lr"]),
            ae_batch=int(merged["ae_batch"]),
            ae_max_frames=int(merged["ae_max_frames"]),
            topology=merged["topology"],
            schedule=parse_schedule(merged["schedule"]),
            lm_scale=float(merged["lm_scale"]),
            word_insertion_penalty=float(merged["word_insertion_penalty"]),
            beam=beam,
            bootstrap=int(merged["bootstrap"]),
            confidence=float(merged["confidence"]),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if not self.streams:
            raise ValueError("streams must not be empty")
        for stream in self.streams:
            parts = stream.split("+")
            if len(set(parts)) != len(parts) or not all(p in BASE_STREAMS
                                                        for p in parts):
                raise ValueError(f"bad stream {stream!r}; parts come from "
                                 f"{BASE_STREAMS}")
        if not self.contexts or any(c not in CONTEXT_LABELS for c in self.contexts):
            raise ValueError(f"contexts must come from {sorted(CONTEXT_LABELS)}")
        if not self.norms or any(n not in ("speaker", "utterance")
                                 for n in self.norms):
            raise ValueError("norms must come from speaker, utterance")
        if self.topology not in ("classic3", "skip2"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if not 0.0 <= self.roi_margin <= 1.0:
            raise ValueError("roi_margin must be in [0, 1]")
        if self.pca_components < 1 or self.pca_components > eigenlips.ROI_DIM:
            raise ValueError("pca_components out of range")
        if self.pca_max_frames <= self.pca_components:
            raise ValueError("pca_max_frames must exceed pca_components")
        if self.lm_scale <= 0.0:
            raise ValueError("lm_scale must be positive")
        if self.beam is not None and self.beam <= 0.0:
            raise ValueError("beam must be positive or none")
        if self.bootstrap < 100:
            raise ValueError("bootstrap must be at least 100")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")

    def semantic_hash(self):
        """Hash of everything that can change results; paths excluded."""
        payload = "\n".join(f"{k}={v}" for k, v in sorted(self.raw.items())
                            if k not in _PATH_KEYS)
        return hashlib.sha256(payload.encode()).hexdigest()

    def decode_config(self):
        return decoder.DecodeConfig(lm_scale=self.lm_scale,
                                    word_insertion_penalty=self.word_insertion_penalty,
                                    beam=self.beam)

    def base_streams_needed(self):
        needed = []
        for stream in self.streams:
            for part in stream.split("+"):
                if part not in needed:
                    needed.append(part)
        return needed


# ---------------------------------------------------------------------------
# artifact stamping and stage caching

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def stamp_path(artifact):
    return Path(str(artifact) + ".meta.json")


def write_stamp(artifact, stage, key, config_hash):
    payload = {"config_hash": config_hash, "key": key, "stage": stage,
               "tool_version": __version__}
    stamp_path(artifact).write_text(json.dumps(payload, sort_keys=True) + "\n",
                                    encoding="utf-8")


def read_stamp(artifact):
    try:
        return json.loads(stamp_path(artifact).read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None


class Runner:
    """Executes stages, skipping those whose outputs are already current."""

    def __init__(self, config_hash):
        self.config_hash = config_hash
        self._digests = {}

    def digest(self, path):
        path = Path(path)
        key = str(path)
        if key not in self._digests:
            self._digests[key] = file_digest(path)
        return self._digests[key]

    def stage(self, name, inputs, params, outputs, build):
        """Run ``build`` unless every output already matches the stage key."""
        payload = {"stage": name, "params": params,
                   "inputs": [self.digest(p) for p in inputs]}
        key = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        current = all(Path(out).exists()
                      and (read_stamp(out) or {}).get("key") == key
                      for out in outputs)
        if current:
            log.info("stage %s: cached", name)
            return False
        build()
        for out in outputs:
            if not Path(out).exists():
                raise FormatError(f"stage {name} did not produce {out}")
            self._digests.pop(str(out), None)
            write_stamp(out, name, key, self.config_hash)
        log.info("stage %s: built", name)
        return True


# ---------------------------------------------------------------------------
# corpus plumbing

def load_corpus(cfg):
    """Manifest records, lexicon, and the speaker-held-out split."""
    records = corpus.load_manifest(cfg.corpus_dir / "manifest.tsv")
    lexicon = lingware.load_lexicon(cfg.corpus_dir / "lexicon.txt")
    if not cfg.test_speakers:
        raise DegenerateSplitError("test_speakers is empty; name at least one")
    speakers = {r.speaker_id for r in records}
    missing = [s for s in cfg.test_speakers if s not in speakers]
    if missing:
        raise DegenerateSplitError(f"test speakers {missing} not in the corpus")
    test = [r for r in records if r.speaker_id in cfg.test_speakers]
    train = [r for r in records if r.speaker_id not in cfg.test_speakers]
    if not train:
        raise DegenerateSplitError("no training speakers left")
    return records, lexicon, train, test


def _load_roi(record):
    landmarks = corpus.read_landmarks(record.landmark_path)
    images = corpus.read_frames(record.frames_path)
    return landmarks, images


# ---------------------------------------------------------------------------
# feature stages (per utterance, cached independently)

def stage_roi(runner, cfg, records):
    out_dir = cfg.out_dir / "roi"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for record in records:
        out = out_dir / f"{record.utterance_id}.vfa"
        paths[record.utterance_id] = out

        def build(record=record, out=out):
            landmarks, images = _load_roi(record)
            rois = frontend.roi_sequence(landmarks, images, margin=cfg.roi_margin)
            seq = features.FeatureSequence(
                frames=rois.reshape(rois.shape[0], -1),
                utterance_id=record.utterance_id,
                speaker_id=record.speaker_id, stream_tag="roi")
            features.save_features(out, seq)

        runner.stage("roi", [record.landmark_path, record.frames_path],
                     {"margin": cfg.roi_margin}, [out], build)
    return paths


def stage_geo(runner, cfg, records):
    out_dir = cfg.out_dir / "geo"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for record in records:
        out = out_dir / f"{record.utterance_id}.vfa"
        paths[record.utterance_id] = out

        def build(record=record, out=out):
            landmarks = corpus.read_landmarks(record.landmark_path)
            feats = geometric.geometric_sequence(landmarks)
            seq = features.FeatureSequence(
                frames=feats, utterance_id=record.utterance_id,
                speaker_id=record.speaker_id, stream_tag="geo")
            features.save_features(out, seq)

        runner.stage("geo", [record.landmark_path], {}, [out], build)
    return paths


def subsample_rows(arrays, cap):
    """Deterministic row subsample across concatenated arrays."""
    stacked = np.vstack(arrays)
    if stacked.shape[0] <= cap:
        return stacked
    idx = np.linspace(0, stacked.shape[0] - 1, cap).round().astype(int)
    return stacked[idx]


def stage_pca(runner, cfg, roi_paths, train_records):
    out = cfg.out_dir / "pca.eig"
    inputs = [roi_paths[r.utterance_id] for r in train_records]

    def build():
        rois = [features.load_features(p).frames for p in inputs]
        sample = subsample_rows(rois, cfg.pca_max_frames)
        model = eigenlips.fit_pca(sample, cfg.pca_components)
        eigenlips.save_pca(out, model)

    runner.stage("pca", inputs,
                 {"components": cfg.pca_components,
                  "max_frames": cfg.pca_max_frames}, [out], build)
    return out


def stage_eig(runner, cfg, roi_paths, records, pca_path):
    out_dir = cfg.out_dir / "eig"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    model = None
    for record in records:
        out = out_dir / f"{record.utterance_id}.vfa"
        paths[record.utterance_id] = out

        def build(record=record, out=out):
            nonlocal model
            if model is None:
                model = eigenlips.load_pca(pca_path)
            roi = features.load_features(roi_paths[record.utterance_id])
            seq = features.FeatureSequence(
                frames=eigenlips.project(model, roi.frames),
                utterance_id=record.utterance_id,
                speaker_id=record.speaker_id, stream_tag="eig")
            features.save_features(out, seq)

        runner.stage("eig", [roi_paths[record.utterance_id], pca_path], {},
                     [out], build)
    return paths


def stage_ae(runner, cfg, roi_paths, train_records):
    out = cfg.out_dir / "autoenc.cae"
    inputs = [roi_paths[r.utterance_id] for r in train_records]

    def build():
        rois = [features.load_features(p).frames for p in inputs]
        sample = subsample_rows(rois, cfg.ae_max_frames)
        h, w = autoencoder.DEFAULT_INPUT_HW
        net = autoencoder.ConvAutoencoder(channels=cfg.ae_channels,
                                          bottleneck=cfg.ae_bottleneck,
                                          seed=cfg.seed)
        net.train(sample.reshape(-1, h, w), epochs=cfg.ae_epochs,
                  lr=cfg.ae_lr, batch_size=cfg.ae_batch, seed=cfg.seed)
        autoencoder.save_autoencoder(out, net)

    runner.stage("ae", inputs,
                 {"channels": list(cfg.ae_channels),
                  "bottleneck": cfg.ae_bottleneck, "epochs": cfg.ae_epochs,
                  "lr": cfg.ae_lr, "batch": cfg.ae_batch,
                  "max_frames": cfg.ae_max_frames, "seed": cfg.seed},
                 [out], build)
    return out


def stage_dnn(runner, cfg, roi_paths, records, ae_path):
    out_dir = cfg.out_dir / "dnn"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    net = None
    for record in records:
        out = out_dir / f"{record.utterance_id}.vfa"
        paths[record.utterance_id] = out

        def build(record=record, out=out):
            nonlocal net
            if net is None:
                net = autoencoder.load_autoencoder(ae_path)
            roi = features.load_features(roi_paths[record.utterance_id])
            h, w = net.input_hw
            codes = net.encode(roi.frames.reshape(-1, h, w))
            seq = features.FeatureSequence(
                frames=codes, utterance_id=record.utterance_id,
                speaker_id=record.speaker_id, stream_tag="dnn")
            features.save_features(out, seq)

        runner.stage("dnn", [roi_paths[record.utterance_id], ae_path], {},
                     [out], build)
    return paths


def stage_lm(runner, cfg, test_records, lexicon):
    """Closed bigram estimated from the test-set transcripts."""
    out = cfg.out_dir / "lm.alm"
    arpa = cfg.out_dir / "lm.arpa"
    manifest = cfg.corpus_dir / "manifest.tsv"

    def build():
        lm = lingware.fit_bigram([r.transcript for r in test_records],
                                 vocabulary=lexicon.words)
        lingware.save_lm(out, lm)
        lingware.write_arpa(arpa, lm)

    runner.stage("lm", [manifest],
                 {"speakers": sorted(cfg.test_speakers)}, [out, arpa], build)
    return out


# ---------------------------------------------------------------------------
# per-cell feature assembly (in memory; base features come off disk)

def assemble_features(base_seqs, stream, context, norm):
    """Normalize each base stream, append deltas, then concatenate.

    ``base_seqs`` maps a base stream name to sequences in a fixed order.
    Returns the combined sequences in that same order.
    """
    parts = stream.split("+")
    processed = []
    for part in parts:
        seqs = features.zscore_normalize(base_seqs[part], norm)
        if context > 0:
            seqs = [features.add_deltas(s, context) for s in seqs]
        processed.append(seqs)
    return [features.combine_streams([p[i] for p in processed])
            for i in range(len(processed[0]))]


def load_base_features(paths_by_stream, records):
    out = {}
    for stream, paths in paths_by_stream.items():
        out[stream] = [features.load_features(paths[r.utterance_id])
                       for r in records]
    return out


# ---------------------------------------------------------------------------
# grid cells

def cell_name(stream, context, norm):
    return f"{stream}_{CONTEXT_LABELS[context]}_{norm}"


def train_cell_model(cfg, train_seqs, train_records, lexicon):
    data = []
    for seq, record in zip(train_seqs, train_records):
        chain = hmm.phone_chain(lexicon, record.transcript, use_sil=True)
        data.append((seq.frames, chain))
    phones = sorted(lexicon.phone_set())
    model = hmm.flat_start([frames for frames, _ in data], phones,
                           topology_kind=cfg.topology, use_sil=True)
    history = hmm.train_em(model, data, schedule=cfg.schedule)
    return model, history


def decode_cell(cfg, model, lm, lexicon, test_seqs):
    graph = decoder.DecodeGraph(model, lm, lexicon)
    dc = cfg.decode_config()
    hyps = {}
    for seq in test_seqs:
        result = decoder.decode_frames(graph, seq.frames, dc)
        hyps[seq.utterance_id] = result.words
    return hyps


def run_cell(cfg, cell, base_paths, lm_path, train_records, test_records,
             lexicon, runner=None):
    """Train, decode, and score one grid cell; returns its report dict."""
    stream, context, norm = cell
    if runner is None:
        runner = Runner(cfg.semantic_hash())
    cell_dir = cfg.out_dir / "cells" / cell_name(stream, context, norm)
    cell_dir.mkdir(parents=True, exist_ok=True)
    model_path = cell_dir / "model.opt"
    hyp_path = cell_dir / "hyp.tsv"
    score_path = cell_dir / "score.json"

    parts = stream.split("+")
    part_paths = {p: base_paths[p] for p in parts}
    all_records = train_records + test_records
    feat_inputs = [part_paths[p][r.utterance_id]
                   for p in parts for r in all_records]
    manifest = cfg.corpus_dir / "manifest.tsv"
    lexicon_path = cfg.corpus_dir / "lexicon.txt"

    cache = {}

    def get_features():
        if "seqs" not in cache:
            base = load_base_features(part_paths, all_records)
            cache["seqs"] = assemble_features(base, stream, context, norm)
        n_train = len(train_records)
        return cache["seqs"][:n_train], cache["seqs"][n_train:]

    def build_model():
        train_seqs, _ = get_features()
        model, history = train_cell_model(cfg, train_seqs, train_records, lexicon)
        hmm.save_model(model_path, model)
        (cell_dir / "loglik.tsv").write_text(
            "".join(f"{m}\t{ll:.6f}\n" for m, ll in history), encoding="utf-8")

    runner.stage(f"train:{cell_name(stream, context, norm)}",
                 feat_inputs + [manifest, lexicon_path],
                 {"stream": stream, "context": context, "norm": norm,
                  "topology": cfg.topology,
                  "schedule": [list(s) for s in cfg.schedule]},
                 [model_path], build_model)

    def build_hyp():
        _, test_seqs = get_features()
        model = hmm.load_model(model_path)
        lm = lingware.load_lm(lm_path)
        hyps = decode_cell(cfg, model, lm, lexicon, test_seqs)
        scoring.save_transcripts(hyp_path, hyps)

    runner.stage(f"decode:{cell_name(stream, context, norm)}",
                 [model_path, lm_path, lexicon_path]
                 + [part_paths[p][r.utterance_id] for p in parts
                    for r in test_records],
                 {"stream": stream, "context": context, "norm": norm,
                  "lm_scale": cfg.lm_scale,
                  "word_insertion_penalty": cfg.word_insertion_penalty,
                  "beam": cfg.beam},
                 [hyp_path], build_hyp)

    def build_score():
        refs = {r.utterance_id: r.transcript for r in test_records}
        hyps = scoring.load_transcripts(hyp_path)
        report = scoring.evaluate(refs, hyps, n_resamples=cfg.bootstrap,
                                  seed=cfg.seed, confidence=cfg.confidence)
        score_path.write_text(report.to_json() + "\n", encoding="utf-8")

    runner.stage(f"score:{cell_name(stream, context, norm)}",
                 [hyp_path, manifest],
                 {"bootstrap": cfg.bootstrap, "seed": cfg.seed,
                  "confidence": cfg.confidence},
                 [score_path], build_score)

    return json.loads(score_path.read_text(encoding="utf-8"))


def _cell_worker(args):
    cfg, cell, base_paths, lm_path, train_records, test_records, lexicon = args
    report = run_cell(cfg, cell, base_paths, lm_path, train_records,
                      test_records, lexicon)
    return cell, report


# ---------------------------------------------------------------------------
# results tables

def _format_cell(report):
    half = (report["ci_high"] - report["ci_low"]) / 2.0
    return f"{report['wer']:.1f}±{half:.1f}"


def write_results(cfg, reports):
    """results.tsv, results.md, and results.json from per-cell reports."""
    columns = [(norm, ctx) for norm in cfg.norms for ctx in cfg.contexts]
    header = ["stream"] + [f"{norm}:{CONTEXT_LABELS[ctx]}"
                           for norm, ctx in columns]
    tsv_lines = ["\t".join(header)]
    md_lines = ["| " + " | ".join(header) + " |",
                "|" + "|".join(["---"] * len(header)) + "|"]
    tree = {}
    for stream in cfg.streams:
        row = [stream]
        for norm, ctx in columns:
            report = reports[(stream, ctx, norm)]
            row.append(_format_cell(report))
            tree.setdefault(stream, {}).setdefault(norm, {})[
                CONTEXT_LABELS[ctx]] = report
        tsv_lines.append("\t".join(row))
        md_lines.append("| " + " | ".join(row) + " |")
    (cfg.out_dir / "results.tsv").write_text("\n".join(tsv_lines) + "\n",
                                             encoding="utf-8")
    (cfg.out_dir / "results.md").write_text("\n".join(md_lines) + "\n",
                                            encoding="utf-8")
    (cfg.out_dir / "results.json").write_text(
        json.dumps(tree, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# full grid

def run_grid(cfg, jobs=1):
    """Build every stage and the 7x4x2 results grid; returns the reports."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    records, lexicon, train_records, test_records = load_corpus(cfg)
    runner = Runner(cfg.semantic_hash())
    needed = cfg.base_streams_needed()

    base_paths = {}
    roi_paths = None
    if "eig" in needed or "dnn" in needed:
        roi_paths = stage_roi(runner, cfg, records)
    if "geo" in needed:
        base_paths["geo"] = stage_geo(runner, cfg, records)
    if "eig" in needed:
        pca_path = stage_pca(runner, cfg, roi_paths, train_records)
        base_paths["eig"] = stage_eig(runner, cfg, roi_paths, records, pca_path)
    if "dnn" in needed:
        ae_path = stage_ae(runner, cfg, roi_paths, train_records)
        base_paths["dnn"] = stage_dnn(runner, cfg, roi_paths, records, ae_path)
    lm_path = stage_lm(runner, cfg, test_records, lexicon)
    scoring.save_transcripts(cfg.out_dir / "ref.tsv",
                             {r.utterance_id: r.transcript
                              for r in test_records})

    cells = [(stream, ctx, norm) for stream in cfg.streams
             for ctx in cfg.contexts for norm in cfg.norms]
    reports = {}
    if jobs > 1:
        args = [(cfg, cell, base_paths, lm_path, train_records, test_records,
                 lexicon) for cell in cells]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, report in pool.map(_cell_worker, args):
                reports[cell] = report
    else:
        for cell in cells:
            reports[cell] = run_cell(cfg, cell, base_paths, lm_path,
                                     train_records, test_records, lexicon,
                                     runner=runner)
    write_results(cfg, reports)
    return reports
