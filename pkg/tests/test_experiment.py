import json
import logging

import numpy as np
import pytest

from vsrlab import experiment, features
from vsrlab.errors import FormatError


def _write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestConfigFile:
    def test_parse_basic(self, tmp_path):
        cfg = _write_config(tmp_path / "a.cfg", """
# comment
seed = 3
streams=geo
  contexts = 0,2
""")
        mapping = experiment.read_config_file(cfg)
        assert mapping == {"seed": "3", "streams": "geo", "contexts": "0,2"}

    def test_include_and_override(self, tmp_path):
        _write_config(tmp_path / "base.cfg", "seed=1\nlm_scale=5\n")
        child = _write_config(tmp_path / "child.cfg",
                              "include base.cfg\nseed=2\n")
        mapping = experiment.read_config_file(child)
        assert mapping == {"seed": "2", "lm_scale": "5"}

    def test_include_cycle_rejected(self, tmp_path):
        _write_config(tmp_path / "a.cfg", "include b.cfg\n")
        _write_config(tmp_path / "b.cfg", "include a.cfg\n")
        with pytest.raises(FormatError, match="cycle"):
            experiment.read_config_file(tmp_path / "a.cfg")

    def test_malformed_line_rejected(self, tmp_path):
        cfg = _write_config(tmp_path / "a.cfg", "just words\n")
        with pytest.raises(FormatError, match="key=value"):
            experiment.read_config_file(cfg)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="cannot read"):
            experiment.read_config_file(tmp_path / "absent.cfg")


class TestConfig:
    def test_defaults(self):
        cfg = experiment.ExperimentConfig.from_mapping({})
        assert cfg.streams == list(experiment.GRID_STREAMS)
        assert cfg.contexts == [0, 1, 2, 3]
        assert cfg.norms == ["speaker", "utterance"]
        assert cfg.schedule == [(1, 4), (2, 4), (4, 4), (8, 4)]
        assert cfg.beam == 200.0
        assert cfg.lm_scale == 10.0
        assert cfg.pca_components == 32

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            experiment.ExperimentConfig.from_mapping({"tyop": "1"})

    def test_bad_values_rejected(self):
        for overrides, pattern in [
            ({"streams": "geo+bogus"}, "bad stream"),
            ({"streams": "geo+geo"}, "bad stream"),
            ({"contexts": "5"}, "contexts"),
            ({"norms": "global"}, "norms"),
            ({"topology": "ergodic"}, "topology"),
            ({"schedule": "4:4,2:4"}, "non-decreasing"),
            ({"lm_scale": "0"}, "lm_scale"),
            ({"beam": "-1"}, "beam"),
        ]:
            with pytest.raises(ValueError, match=pattern):
                experiment.ExperimentConfig.from_mapping(overrides)

    def test_beam_none_spellings(self):
        for spelling in ("none", "None", "inf", ""):
            cfg = experiment.ExperimentConfig.from_mapping({"beam": spelling})
            assert cfg.beam is None

    def test_semantic_hash_ignores_paths(self):
        a = experiment.ExperimentConfig.from_mapping(
            {"corpus_dir": "/x", "out_dir": "/y"})
        b = experiment.ExperimentConfig.from_mapping(
            {"corpus_dir": "/other", "out_dir": "/elsewhere"})
        c = experiment.ExperimentConfig.from_mapping({"lm_scale": "7"})
        assert a.semantic_hash() == b.semantic_hash()
        assert a.semantic_hash() != c.semantic_hash()

    def test_base_streams_needed(self):
        cfg = experiment.ExperimentConfig.from_mapping({"streams": "geo,geo+eig"})
        assert cfg.base_streams_needed() == ["geo", "eig"]


class TestStamps:
    def test_round_trip(self, tmp_path):
        artifact = tmp_path / "thing.bin"
        artifact.write_bytes(b"payload")
        experiment.write_stamp(artifact, "stage", "k" * 8, "c" * 8)
        stamp = experiment.read_stamp(artifact)
        assert stamp["stage"] == "stage"
        assert stamp["key"] == "k" * 8
        assert stamp["config_hash"] == "c" * 8
        assert "tool_version" in stamp

    def test_missing_or_corrupt_stamp(self, tmp_path):
        artifact = tmp_path / "thing.bin"
        assert experiment.read_stamp(artifact) is None
        experiment.stamp_path(artifact).write_text("{not json", encoding="utf-8")
        assert experiment.read_stamp(artifact) is None


class TestRunner:
    def _runner(self):
        return experiment.Runner("cfg-hash")

    def test_caches_when_outputs_current(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("hello", encoding="utf-8")
        out = tmp_path / "out.txt"
        calls = []

        def build():
            calls.append(1)
            out.write_text("built", encoding="utf-8")

        runner = self._runner()
        assert runner.stage("s", [src], {"p": 1}, [out], build) is True
        assert experiment.Runner("cfg-hash").stage(
            "s", [src], {"p": 1}, [out], build) is False
        assert len(calls) == 1

    def test_param_change_rebuilds(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("hello", encoding="utf-8")
        out = tmp_path / "out.txt"
        calls = []

        def build():
            calls.append(1)
            out.write_text("built", encoding="utf-8")

        experiment.Runner("h").stage("s", [src], {"p": 1}, [out], build)
        experiment.Runner("h").stage("s", [src], {"p": 2}, [out], build)
        assert len(calls) == 2

    def test_input_change_rebuilds(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("hello", encoding="utf-8")
        out = tmp_path / "out.txt"
        calls = []

        def build():
            calls.append(1)
            out.write_text("built", encoding="utf-8")

        experiment.Runner("h").stage("s", [src], {}, [out], build)
        src.write_text("changed", encoding="utf-8")
        experiment.Runner("h").stage("s", [src], {}, [out], build)
        assert len(calls) == 2

    def test_deleted_output_rebuilds(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("hello", encoding="utf-8")
        out = tmp_path / "out.txt"
        calls = []

        def build():
            calls.append(1)
            out.write_text("built", encoding="utf-8")

        experiment.Runner("h").stage("s", [src], {}, [out], build)
        out.unlink()
        experiment.Runner("h").stage("s", [src], {}, [out], build)
        assert len(calls) == 2

    def test_missing_output_is_an_error(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("hello", encoding="utf-8")
        with pytest.raises(FormatError, match="did not produce"):
            experiment.Runner("h").stage("s", [src], {},
                                         [tmp_path / "never.txt"], lambda: None)


class TestAssemble:
    def _seqs(self, stream, dim, rng):
        out = []
        for i, spk in enumerate(("s0", "s0", "s1")):
            out.append(features.FeatureSequence(
                frames=rng.normal(size=(6 + i, dim)),
                utterance_id=f"u{i}", speaker_id=spk, stream_tag=stream))
        return out

    def test_matches_manual_pipeline(self):
        rng = np.random.default_rng(0)
        base = {"geo": self._seqs("geo", 3, rng),
                "eig": self._seqs("eig", 2, rng)}
        got = experiment.assemble_features(base, "geo+eig", 2, "utterance")

        manual = []
        for part in ("geo", "eig"):
            seqs = features.zscore_normalize(base[part], "utterance")
            manual.append([features.add_deltas(s, 2) for s in seqs])
        for i in range(3):
            expect = np.hstack([manual[0][i].frames, manual[1][i].frames])
            assert np.array_equal(got[i].frames, expect)
            assert got[i].utterance_id == f"u{i}"

    def test_context_zero_keeps_statics(self):
        rng = np.random.default_rng(1)
        base = {"geo": self._seqs("geo", 3, rng)}
        got = experiment.assemble_features(base, "geo", 0, "speaker")
        assert got[0].frames.shape[1] == 3
        assert got[0].delta_context == 0


@pytest.fixture(scope="module")
def grid_out(tiny_corpus, tmp_path_factory):
    corpus_dir, _ = tiny_corpus
    out_dir = tmp_path_factory.mktemp("grid")
    cfg = experiment.ExperimentConfig.from_mapping({
        "corpus_dir": str(corpus_dir), "out_dir": str(out_dir),
        "test_speakers": "spk01", "streams": "geo", "contexts": "0,1",
        "norms": "utterance", "schedule": "1:2", "bootstrap": "200",
        "beam": "none",
    })
    reports = experiment.run_grid(cfg)
    return cfg, reports


class TestGrid:
    def test_reports_and_tables(self, grid_out):
        cfg, reports = grid_out
        assert set(reports) == {("geo", 0, "utterance"), ("geo", 1, "utterance")}
        for report in reports.values():
            assert 0.0 <= report["wer"]
            assert report["ci_low"] <= report["wer"] <= report["ci_high"]

        tsv = (cfg.out_dir / "results.tsv").read_text(encoding="utf-8")
        lines = tsv.strip().split("\n")
        assert lines[0].split("\t") == ["stream", "utterance:raw",
                                        "utterance:dd1"]
        assert lines[1].split("\t")[0] == "geo"
        assert "±" in lines[1]

        tree = json.loads((cfg.out_dir / "results.json").read_text())
        assert tree["geo"]["utterance"]["raw"]["wer"] == \
            reports[("geo", 0, "utterance")]["wer"]

        md = (cfg.out_dir / "results.md").read_text(encoding="utf-8")
        assert md.startswith("| stream | utterance:raw | utterance:dd1 |")

    def test_artifacts_stamped(self, grid_out):
        cfg, _ = grid_out
        cell = cfg.out_dir / "cells" / "geo_raw_utterance"
        for name in ("model.opt", "hyp.tsv", "score.json"):
            stamp = experiment.read_stamp(cell / name)
            assert stamp is not None
            assert stamp["config_hash"] == cfg.semantic_hash()

    def test_ref_matches_test_speaker(self, grid_out, tiny_corpus):
        cfg, _ = grid_out
        _, records = tiny_corpus
        refs = (cfg.out_dir / "ref.tsv").read_text(encoding="utf-8")
        ids = [line.split("\t")[0] for line in refs.strip().split("\n")]
        expect = [r.utterance_id for r in records if r.speaker_id == "spk01"]
        assert ids == expect

    def test_deleting_decode_outputs_skips_training(self, grid_out, caplog):
        cfg, first = grid_out
        for cell_dir in (cfg.out_dir / "cells").iterdir():
            for name in ("hyp.tsv", "score.json"):
                (cell_dir / name).unlink()
                experiment.stamp_path(cell_dir / name).unlink()
        with caplog.at_level(logging.INFO, logger="vsrlab.experiment"):
            second = experiment.run_grid(cfg)
        built = [r.message for r in caplog.records if "built" in r.message]
        assert any(m.startswith("stage decode:") for m in built)
        assert not any(m.startswith("stage train:") for m in built)
        for cell in first:
            assert second[cell] == first[cell]

    def test_unknown_test_speaker_rejected(self, tiny_corpus, tmp_path):
        corpus_dir, _ = tiny_corpus
        cfg = experiment.ExperimentConfig.from_mapping({
            "corpus_dir": str(corpus_dir), "out_dir": str(tmp_path),
            "test_speakers": "spk99", "streams": "geo"})
        with pytest.raises(Exception, match="spk99"):
            experiment.run_grid(cfg)
