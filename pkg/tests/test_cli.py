import csv
import io
import json
import shutil
import struct

import numpy as np
import pytest

from codec_resynth import cli
from codec_resynth.config import default_config
from codec_resynth.corpus import load_corpus, read_wav
from codec_resynth.metrics import estoi, si_snr
from codec_resynth.rvq import bitrate, dequantize, load_model as load_rvq, quantize
from codec_resynth.transform import decode_frames, encode_frames

TINY = dict(
    corpus={"num_utterances": 14},
    codec={"num_layers": 3, "codebook_size": 16, "train_utterances": 6, "kmeans_iters": 5},
    train={"steps": 30, "warmup_steps": 5, "hidden_dims": [16], "embed_dim": 8, "batch_crops": 2,
           "crop_frames": 8, "log_every": 0},
    eval={"nfe_list": [1, 3], "num_test_utterances": 3},
)


def tiny_config(**extra):
    sections = {k: dict(v) for k, v in TINY.items()}
    for k, v in extra.items():
        sections[k] = {**sections.get(k, {}), **v}
    return default_config().with_overrides(**sections)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config()
    cfg.save(root / "cfg.json")
    out = root / "run"
    assert run("pipeline", "--config", root / "cfg.json", "--out", out) == 0
    return cfg, root / "cfg.json", out


def _csv_rows(text):
    return list(csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#")))


class TestInitConfig:
    def test_writes_complete_config(self, tmp_path):
        assert run("init-config", tmp_path / "c.json") == 0
        d = json.loads((tmp_path / "c.json").read_text())
        assert d["train"]["peak_lr_c2f"] == 1e-4 and d["schedule"]["T"] == 1000

    def test_refuses_overwrite(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{}")
        assert run("init-config", tmp_path / "c.json") == 1
        assert (tmp_path / "c.json").read_text() == "{}"
        assert run("init-config", tmp_path / "c.json", "--force") == 0


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert run("gen-corpus", "--config", tmp_path / "nope.json") == 1

    def test_malformed_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"version": 1}))
        assert run("gen-corpus", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1

    def test_bad_arguments(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("train", "--method", "nope", "--config", "x")
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == 1

    def test_internal_error(self, tmp_path, monkeypatch):
        tiny_config().save(tmp_path / "c.json")

        def boom(*a):
            raise RuntimeError("bug")

        monkeypatch.setitem(cli.COMMANDS, "gen-corpus", boom)
        assert run("gen-corpus", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 2
        assert not (tmp_path / "o" / ".lock").exists()

    def test_codec_before_corpus(self, tmp_path):
        tiny_config().save(tmp_path / "c.json")
        assert run("train-codec", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1

    def test_bad_thread_env(self, tmp_path, monkeypatch):
        tiny_config().save(tmp_path / "c.json")
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        assert run("dump-schedule", "--config", tmp_path / "c.json") == 1
        monkeypatch.setenv(cli.THREADS_ENV, "1")
        assert run("dump-schedule", "--config", tmp_path / "c.json", "--out", tmp_path / "s") == 0


class TestOutputDirectory:
    def test_lock_refuses_second_writer(self, tmp_path):
        tiny_config().save(tmp_path / "c.json")
        (tmp_path / "o" / ".lock").mkdir(parents=True)
        assert run("gen-corpus", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1
        assert not (tmp_path / "o" / "corpus").exists()

    def test_other_config_refused(self, tmp_path):
        tiny_config().save(tmp_path / "a.json")
        tiny_config(train={"seed": 9}).save(tmp_path / "b.json")
        assert run("dump-schedule", "--config", tmp_path / "a.json") == 0
        assert run("gen-corpus", "--config", tmp_path / "a.json", "--out", tmp_path / "o") == 0
        assert run("gen-corpus", "--config", tmp_path / "b.json", "--out", tmp_path / "o") == 1

    def test_dump_schedule_stdout(self, tmp_path, capsys):
        tiny_config().save(tmp_path / "c.json")
        assert run("dump-schedule", "--config", tmp_path / "c.json") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 + 1001


class TestGenCorpus:
    def test_manifest_count(self, pipeline):
        cfg, _, out = pipeline
        assert len((out / "corpus" / "manifest.jsonl").read_text().splitlines()) == cfg.corpus.num_utterances

    def test_durations_from_headers(self, pipeline):
        cfg, _, out = pipeline
        for path in sorted((out / "corpus").glob("utt_*.wav")):
            raw = path.read_bytes()
            # canonical 44-byte header: byte rate at 28, data size at 40
            byte_rate, = struct.unpack("<I", raw[28:32])
            data_size, = struct.unpack("<I", raw[40:44])
            seconds = data_size / byte_rate
            assert cfg.corpus.duration_s_min - 1e-3 <= seconds <= cfg.corpus.duration_s_max + 1e-3

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        _, cfg_path, out = pipeline
        assert run("gen-corpus", "--config", cfg_path, "--out", tmp_path / "o") == 0
        for path in sorted((out / "corpus").glob("utt_*.wav")):
            assert (tmp_path / "o" / "corpus" / path.name).read_bytes() == path.read_bytes()


class TestTrainCodec:
    def test_residual_log(self, pipeline):
        cfg, _, out = pipeline
        rows = list(csv.DictReader(io.StringIO((out / "codec" / "residuals.csv").read_text())))
        logged = [float(r["mean_residual_norm"]) for r in rows]
        assert len(logged) == cfg.codec.num_layers
        assert all(b <= a for a, b in zip(logged, logged[1:]))
        # recompute from the saved model
        rvq = load_rvq(out / "codec" / "rvq.bin")
        wavs = load_corpus(out / "corpus", range(cfg.codec.train_utterances))
        z = np.concatenate([encode_frames(w, cfg.frame_config).values for w in wavs])
        codes, _ = quantize(rvq, z)
        for i, value in enumerate(logged, 1):
            resid = z - dequantize(rvq, codes, upto_layer=i)
            assert np.isclose(np.linalg.norm(resid, axis=1).mean(), value, rtol=1e-9)

    def test_bitrate_echo(self, pipeline):
        cfg, _, out = pipeline
        meta = json.loads((out / "codec" / "codec_meta.json").read_text())
        assert meta["bitrate_bps"] == bitrate(load_rvq(out / "codec" / "rvq.bin"), 125.0) == 125 * 3 * 4
        assert meta["config_hash"] == cfg.digest()

    def test_deterministic(self, pipeline, tmp_path):
        _, cfg_path, out = pipeline
        shutil.copytree(out / "corpus", tmp_path / "o" / "corpus")
        assert run("train-codec", "--config", cfg_path, "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "codec" / "rvq.bin").read_bytes() == (out / "codec" / "rvq.bin").read_bytes()


class TestTrain:
    def test_artifacts(self, pipeline):
        cfg, _, out = pipeline
        for method in ("c2f", "onestep", "bridge"):
            rows = list(csv.DictReader(io.StringIO((out / "models" / f"{method}_loss.csv").read_text())))
            assert len(rows) == cfg.train.steps
            assert float(rows[cfg.train.warmup_steps - 1]["lr"]) == getattr(cfg.train, f"peak_lr_{method}")
            meta = json.loads((out / "models" / f"{method}_meta.json").read_text())
            assert meta["config_hash"] == cfg.digest()
            assert meta["codec_sha256"] == cli.file_sha256(out / "codec" / "rvq.bin")

    def test_baseline_not_trainable(self, pipeline):
        _, cfg_path, out = pipeline
        assert run("train", "--method", "baseline", "--config", cfg_path, "--out", out) == 1

    def test_seed_override_recorded(self, pipeline, tmp_path):
        _, cfg_path, out = pipeline
        for sub in ("corpus", "codec"):
            shutil.copytree(out / sub, tmp_path / "o" / sub)
        assert run("train", "--method", "onestep", "--seed", 4, "--config", cfg_path, "--out", tmp_path / "o") == 0
        meta = json.loads((tmp_path / "o" / "models" / "onestep_meta.json").read_text())
        assert meta["seed"] == 4
        assert meta["checkpoint_sha256"] != json.loads((out / "models" / "onestep_meta.json").read_text())[
            "checkpoint_sha256"]


class TestResynth:
    def test_nfe_metadata(self, pipeline):
        cfg, _, out = pipeline
        expect = {"baseline": 0, "onestep": 1, "c2f": cfg.codec.num_layers - 1}
        for method, nfe in expect.items():
            assert json.loads((out / "resynth" / method / "metadata.json").read_text())["nfe"] == nfe
        for nfe in cfg.eval.nfe_list:
            meta = json.loads((out / "resynth" / f"bridge_nfe{nfe}" / "metadata.json").read_text())
            assert meta["nfe"] == nfe and all(f["nfe"] == nfe for f in meta["files"])

    def test_user_nfe_and_input(self, pipeline, tmp_path):
        _, cfg_path, out = pipeline
        wav = out / "corpus" / "utt_00000.wav"
        args = ("resynth", "--method", "bridge", "--nfe", 5, "--input", wav, "--config", cfg_path, "--out", out)
        assert run(*args) == 0
        meta = json.loads((out / "resynth" / "bridge_nfe5" / "metadata.json").read_text())
        assert meta["nfe"] == 5 and meta["files"] == [{"file": "utt_00000.wav", "nfe": 5}]
        first = (out / "resynth" / "bridge_nfe5" / "utt_00000.wav").read_bytes()
        assert run(*args) == 0
        assert (out / "resynth" / "bridge_nfe5" / "utt_00000.wav").read_bytes() == first

    def test_baseline_is_layer1_decode(self, pipeline):
        cfg, _, out = pipeline
        rvq = load_rvq(out / "codec" / "rvq.bin")
        name = f"utt_{cfg.test_indices()[0]:05d}.wav"
        wav = read_wav(out / "corpus" / name)
        codes, _ = quantize(rvq, encode_frames(wav, cfg.frame_config))
        expect = decode_frames(dequantize(rvq, codes, upto_layer=1), cfg.frame_config)
        got = read_wav(out / "resynth" / "baseline" / name)
        assert np.max(np.abs(got.samples - np.clip(expect.samples, -1, 1))) <= 1 / 32768

    def test_missing_checkpoint(self, pipeline, tmp_path):
        _, cfg_path, out = pipeline
        shutil.copytree(out / "codec", tmp_path / "o" / "codec")
        assert run("resynth", "--method", "onestep", "--config", cfg_path, "--out", tmp_path / "o") == 1


class TestEval:
    def test_rows(self, pipeline):
        cfg, _, out = pipeline
        rows = _csv_rows((out / "report" / "report.csv").read_text())
        methods = [r["method"] for r in rows]
        for name in ("ground_truth", "baseline", "c2f", "onestep", "topline_z", f"topline_rvq_{cfg.codec.num_layers}"):
            assert name in methods
        assert [int(r["nfe"]) for r in rows if r["method"] == "bridge"] == list(cfg.eval.nfe_list)
        sweep = _csv_rows((out / "report" / "layer_sweep.csv").read_text())
        assert len(sweep) == cfg.codec.num_layers + 1

    def test_baseline_row_recomputed(self, pipeline):
        cfg, _, out = pipeline
        rows = _csv_rows((out / "report" / "report.csv").read_text())
        base = next(r for r in rows if r["method"] == "baseline")
        rvq = load_rvq(out / "codec" / "rvq.bin")
        snr, sto = [], []
        for wav in load_corpus(out / "corpus", cfg.test_indices()):
            z = encode_frames(wav, cfg.frame_config)
            codes, _ = quantize(rvq, z)
            est = decode_frames(dequantize(rvq, codes, upto_layer=1), cfg.frame_config)
            ref = type(wav)(wav.samples[:len(est)], wav.sample_rate_hz)
            snr.append(si_snr(est, ref))
            sto.append(estoi(est, ref))
        assert float(base["si_snr_db_mean"]) == pytest.approx(np.mean(snr), abs=1e-12)
        assert float(base["estoi_mean"]) == pytest.approx(np.mean(sto), abs=1e-12)

    def test_json_matches_csv(self, pipeline):
        _, _, out = pipeline
        rep = json.loads((out / "report" / "report.json").read_text())
        rows = _csv_rows((out / "report" / "report.csv").read_text())
        assert [r["method"] for r in rep["rows"]] == [r["method"] for r in rows]

    def test_checkpoint_replays(self, pipeline, tmp_path):
        _, cfg_path, out = pipeline
        shutil.copytree(out, tmp_path / "o")
        assert run("eval", "--config", cfg_path, "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "report" / "report.csv").read_bytes() == (out / "report" / "report.csv").read_bytes()

    def test_refuses_foreign_codec(self, pipeline, tmp_path):
        cfg, cfg_path, out = pipeline
        shutil.copytree(out, tmp_path / "o")
        other = cfg.with_overrides(codec={"seed": 1})
        other.save(tmp_path / "other.json")
        assert run("gen-corpus", "--config", tmp_path / "other.json", "--out", tmp_path / "p") == 0
        assert run("train-codec", "--config", tmp_path / "other.json", "--out", tmp_path / "p") == 0
        # same lineage check passes, but the checkpoints were trained against the old codec
        shutil.copy(tmp_path / "p" / "codec" / "rvq.bin", tmp_path / "o" / "codec" / "rvq.bin")
        assert run("eval", "--config", cfg_path, "--out", tmp_path / "o") == 1
        meta = json.loads((tmp_path / "p" / "codec" / "codec_meta.json").read_text())
        (tmp_path / "o" / "codec" / "codec_meta.json").write_text(json.dumps({
            **json.loads((out / "codec" / "codec_meta.json").read_text()), "rvq_sha256": meta["rvq_sha256"]}))
        assert run("eval", "--config", cfg_path, "--out", tmp_path / "o") == 1

    def test_refuses_foreign_lineage(self, pipeline, tmp_path):
        cfg, cfg_path, out = pipeline
        shutil.copytree(out, tmp_path / "o")
        meta_path = tmp_path / "o" / "codec" / "codec_meta.json"
        meta = json.loads(meta_path.read_text())
        meta["lineage_digest"] = "0" * 16
        meta_path.write_text(json.dumps(meta))
        assert run("eval", "--config", cfg_path, "--out", tmp_path / "o") == 1
