"""Command-line driver: corpus -> codec -> models -> resynthesis -> report.

Every command takes ``--config`` (a complete JSON config, see ``init-config``)
and writes under ``--out`` (default: the config's ``out_dir``)::

    corpus/   utt_XXXXX.wav, manifest.jsonl, corpus_meta.json
    codec/    rvq.bin, residuals.csv, codec_meta.json
    models/   <method>.ckpt, <method>_loss.csv, <method>_meta.json
    resynth/  <method>[_nfe<k>]/utt_XXXXX.wav, metadata.json
    report/   report.csv, report.json, layer_sweep.csv

Exit codes: 0 success, 1 user error (bad config, missing input, hash
mismatch, locked directory), 2 internal error. ``CODEC_RESYNTH_THREADS``
caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import make_symmetric_schedule
from .config import ConfigError, RunConfig, default_config
from .corpus import WavFormatError, generate_corpus, load_corpus, read_wav, write_wav
from .metrics import eval_suite
from .resynth import (
    METHODS,
    MethodMismatch,
    load_model,
    make_pairs,
    resynthesize,
    save_model,
    train_bridge,
    train_coarse_to_fine,
    train_one_step,
)
from .rvq import bitrate, load_model as load_rvq, quantize, save_model as save_rvq, train_rvq
from .transform import encode_frames

logger = logging.getLogger("codec_resynth")

TRAINED_METHODS = ("c2f", "onestep", "bridge")
THREADS_ENV = "CODEC_RESYNTH_THREADS"


class UserError(Exception):
    """Problem the user can fix; reported without a traceback, exit code 1."""


# helpers ---------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise UserError(f"{p} not found; run the earlier pipeline step first")
    return json.loads(p.read_text())


@contextlib.contextmanager
def directory_lock(out: Path):
    """Exclusive writer lock: an atomic ``mkdir`` of ``out/.lock``."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        lock.mkdir()
    except FileExistsError:
        raise UserError(f"{out} is locked by another run (remove {lock} if that run is gone)") from None
    try:
        (lock / "pid").write_text(str(os.getpid()))
        yield
    finally:
        (lock / "pid").unlink(missing_ok=True)
        lock.rmdir()


def _bind_config(cfg: RunConfig, out: Path):
    """Record the config in ``out`` or check it matches the one already recorded there."""
    path = out / "config.json"
    if path.exists():
        recorded = RunConfig.load(path)
        if recorded.digest() != cfg.digest():
            raise UserError(f"{out} holds results of config {recorded.digest()}, this config is {cfg.digest()}; "
                            "use another --out")
    else:
        cfg.save(path)


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UserError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _corpus(out: Path, cfg: RunConfig, indices):
    meta = _read_json(out / "corpus" / "corpus_meta.json")
    if meta["corpus_digest"] != _corpus_digest(cfg):
        raise UserError("corpus on disk was generated from a different corpus config")
    return load_corpus(out / "corpus", indices)


def _corpus_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict()["corpus"], sort_keys=True).encode()).hexdigest()[:16]


def _codec(out: Path, cfg: RunConfig):
    meta = _read_json(out / "codec" / "codec_meta.json")
    if meta["lineage_digest"] != cfg.lineage_digest():
        raise UserError("codec on disk was trained under a different corpus/codec config")
    path = out / "codec" / "rvq.bin"
    sha = file_sha256(path)
    if sha != meta["rvq_sha256"]:
        raise UserError(f"{path} does not match its metadata hash")
    return load_rvq(path), sha


def _model(out: Path, cfg: RunConfig, method: str, codec_sha: str):
    path = out / "models" / f"{method}.ckpt"
    if not path.exists():
        raise UserError(f"no {method} checkpoint at {path}; run `train --method {method}` first")
    model, meta = load_model(path)
    if meta.get("codec_sha256") != codec_sha:
        raise UserError(f"{path} was trained against a different codec (hash mismatch)")
    if meta.get("lineage_digest") != cfg.lineage_digest():
        raise UserError(f"{path} was trained under a different corpus/codec/schedule config")
    return model, meta, file_sha256(path)


# commands ----------------------------------------------------------------------


def cmd_init_config(args):
    path = Path(args.path)
    if path.exists() and not args.force:
        raise UserError(f"{path} exists (use --force to overwrite)")
    cfg = default_config()
    if args.out:
        cfg = cfg.with_overrides(out_dir=str(args.out))
    cfg.save(path)
    print(f"wrote {path} (config {cfg.digest()})")


def cmd_gen_corpus(args, cfg: RunConfig, out: Path):
    records = generate_corpus(cfg.corpus, out / "corpus")
    _write_json(out / "corpus" / "corpus_meta.json", {
        "config_hash": cfg.digest(), "corpus_digest": _corpus_digest(cfg), "num_utterances": len(records),
        "train_indices": [0, cfg.num_train_utterances], "test_indices": [cfg.num_train_utterances,
                                                                         cfg.corpus.num_utterances],
    })
    print(f"wrote {len(records)} utterances to {out / 'corpus'}")


def cmd_train_codec(args, cfg: RunConfig, out: Path):
    c = cfg.codec
    wavs = _corpus(out, cfg, range(c.train_utterances))
    fcfg = cfg.frame_config
    embs = [encode_frames(w, fcfg) for w in wavs]
    model = train_rvq(embs, c.num_layers, c.codebook_size, c.kmeans_iters, c.seed)
    (out / "codec").mkdir(exist_ok=True)
    save_rvq(model, out / "codec" / "rvq.bin")
    # training residuals recomputed from the saved (float32) codebooks
    saved = load_rvq(out / "codec" / "rvq.bin")
    _, norms = quantize(saved, np.concatenate([e.values for e in embs]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "mean_residual_norm"])
    for i, n in enumerate(norms, 1):
        w.writerow([i, repr(n)])
    (out / "codec" / "residuals.csv").write_text(buf.getvalue())
    bps = bitrate(saved, fcfg.frame_rate_hz)
    _write_json(out / "codec" / "codec_meta.json", {
        "config_hash": cfg.digest(), "lineage_digest": cfg.lineage_digest(),
        "rvq_sha256": file_sha256(out / "codec" / "rvq.bin"), "bitrate_bps": bps,
        "frame_rate_hz": fcfg.frame_rate_hz, "num_layers": c.num_layers, "codebook_size": c.codebook_size,
        "train_utterances": c.train_utterances, "residual_norms": norms,
    })
    print(f"codec: N={c.num_layers} V={c.codebook_size} at {fcfg.frame_rate_hz:g} Hz -> {bps:g} bits/s")


def cmd_train(args, cfg: RunConfig, out: Path):
    method = args.method
    if method not in TRAINED_METHODS:
        raise UserError(f"method {method!r} has nothing to train; choose from {TRAINED_METHODS}")
    rvq, codec_sha = _codec(out, cfg)
    wavs = _corpus(out, cfg, cfg.train_indices())
    pairs = make_pairs(wavs, cfg.frame_config, rvq)
    hyper = cfg.train.hyper(method, args.seed)
    start = time.perf_counter()
    if method == "onestep":
        model, state, losses = train_one_step(pairs, rvq, hyper)
    elif method == "bridge":
        s = cfg.schedule
        model, state, losses = train_bridge(pairs, rvq, make_symmetric_schedule(s.T, s.beta_peak, s.beta_min), hyper)
    else:
        model, state, losses = train_coarse_to_fine(pairs, rvq, hyper)
    elapsed = time.perf_counter() - start
    models = out / "models"
    models.mkdir(exist_ok=True)
    meta = {"config_hash": cfg.digest(), "lineage_digest": cfg.lineage_digest(), "codec_sha256": codec_sha,
            "seed": hyper.seed, "steps": hyper.steps, "peak_lr": hyper.peak_lr}
    save_model(models / f"{method}.ckpt", model, state, meta)
    from .nnet.optim import lr_at

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for step, loss in enumerate(losses, 1):
        w.writerow([step, repr(loss), repr(lr_at(step, hyper.peak_lr, hyper.warmup_steps, hyper.steps))])
    (models / f"{method}_loss.csv").write_text(buf.getvalue())
    _write_json(models / f"{method}_meta.json", {
        **meta, "method": method, "checkpoint_sha256": file_sha256(models / f"{method}.ckpt"),
        "num_params": int(model.params.values.size), "train_utterances": len(pairs),
        "final_loss_mean_last_100": float(np.mean(losses[-100:])),
    })
    logger.info("%s trained in %.1f s", method, elapsed)
    print(f"{method}: {hyper.steps} steps, final loss {np.mean(losses[-100:]):.4f} -> {models / (method + '.ckpt')}")


def cmd_resynth(args, cfg: RunConfig, out: Path):
    method = args.method
    rvq, codec_sha = _codec(out, cfg)
    model, ckpt_sha = None, None
    if method != "baseline":
        model, _, ckpt_sha = _model(out, cfg, method, codec_sha)
    seed = cfg.eval.seed if args.seed is None else args.seed
    if method == "bridge":
        nfe_runs = [args.nfe] if args.nfe is not None else list(cfg.eval.nfe_list)
    else:
        if args.nfe is not None:
            logger.warning("--nfe is ignored for %s (fixed cost)", method)
        nfe_runs = [None]
    if args.input:
        inputs = [(Path(args.input).stem, 0, read_wav(args.input))]
    else:
        idx = cfg.test_indices()
        inputs = [(f"utt_{i:05d}", u, w) for u, (i, w) in enumerate(zip(idx, _corpus(out, cfg, idx)))]
    for nfe in nfe_runs:
        sub = out / "resynth" / (method if nfe is None else f"{method}_nfe{nfe}")
        sub.mkdir(parents=True, exist_ok=True)
        files = []
        for name, u, wav in inputs:
            rng = np.random.default_rng([seed, u, nfe]) if nfe is not None else None
            res = resynthesize(method, wav, cfg.frame_config, rvq, model, nfe=nfe, rng=rng)
            write_wav(res.waveform, sub / f"{name}.wav")
            files.append({"file": f"{name}.wav", "nfe": res.nfe})
        used = sorted({f["nfe"] for f in files})
        _write_json(sub / "metadata.json", {
            "method": method, "nfe": used[0] if len(used) == 1 else used, "requested_nfe": nfe, "seed": seed,
            "config_hash": cfg.digest(), "codec_sha256": codec_sha, "checkpoint_sha256": ckpt_sha, "files": files,
        })
        print(f"{method}: wrote {len(files)} files to {sub} (nfe {used})")


def cmd_eval(args, cfg: RunConfig, out: Path):
    rvq, codec_sha = _codec(out, cfg)
    models, hashes = {}, {}
    for method in TRAINED_METHODS:
        if (out / "models" / f"{method}.ckpt").exists():
            models[method], meta, hashes[method] = _model(out, cfg, method, codec_sha)
        else:
            logger.warning("no %s checkpoint; its rows are skipped", method)
    seed = cfg.eval.seed if args.seed is None else args.seed
    test = _corpus(out, cfg, cfg.test_indices())
    report = eval_suite(models, test, cfg.frame_config, rvq, list(cfg.eval.nfe_list), seed=seed)
    report.header.update({"config_hash": cfg.digest(), "codec_sha256": codec_sha, "eval_seed": seed,
                          "version": __version__})
    for method, sha in hashes.items():
        report.header[f"checkpoint_sha256_{method}"] = sha
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    (rep / "report.csv").write_text(report.to_csv())
    (rep / "layer_sweep.csv").write_text(report.layer_sweep_csv())
    (rep / "report.json").write_text(report.to_json() + "\n")
    print(report.to_csv(), end="")


def cmd_dump_schedule(args, cfg: RunConfig, out: Path | None):
    s = cfg.schedule
    text = make_symmetric_schedule(s.T, s.beta_peak, s.beta_min).to_csv()
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "schedule.csv").write_text(text)
        print(f"wrote {out / 'schedule.csv'}")


def cmd_pipeline(args, cfg: RunConfig, out: Path):
    """gen-corpus -> train-codec -> train (all methods) -> resynth (all methods) -> eval."""
    cmd_gen_corpus(args, cfg, out)
    cmd_train_codec(args, cfg, out)
    for method in TRAINED_METHODS:
        cmd_train(argparse.Namespace(method=method, seed=args.seed), cfg, out)
    for method in METHODS:
        cmd_resynth(argparse.Namespace(method=method, seed=None, nfe=None, input=None), cfg, out)
    cmd_eval(argparse.Namespace(seed=None), cfg, out)


# entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codec-resynth", description="Resynthesis from first-layer codec tokens.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, seed=False, method=False, nfe=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON config written by init-config")
        sp.add_argument("--out", help="output directory (default: the config's out_dir)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        if method:
            sp.add_argument("--method", required=True, choices=METHODS)
        if nfe:
            sp.add_argument("--nfe", type=int, default=None, help="bridge steps (default: every configured NFE)")
        return sp

    ini = sub.add_parser("init-config", help="write the default config with every key explicit")
    ini.add_argument("path")
    ini.add_argument("--out", help="out_dir recorded in the config")
    ini.add_argument("--force", action="store_true")
    add("gen-corpus", "synthesize the corpus")
    add("train-codec", "train the RVQ codec")
    add("train", "train one resynthesis model", seed=True, method=True)
    rs = add("resynth", "resynthesize held-out utterances or one WAV", seed=True, method=True, nfe=True)
    rs.add_argument("--input", help="a mono 16-bit WAV instead of the held-out set")
    add("eval", "evaluate every trained method and write the report", seed=True)
    add("dump-schedule", "write the noise schedule as CSV")
    add("pipeline", "run every step in order", seed=True)
    return p


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train-codec": cmd_train_codec, "train": cmd_train, "resynth": cmd_resynth,
    "eval": cmd_eval, "dump-schedule": cmd_dump_schedule, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            if args.command == "init-config":
                cmd_init_config(args)
                return 0
            cfg = RunConfig.load(args.config) if Path(args.config).exists() else None
            if cfg is None:
                raise UserError(f"config {args.config} not found (create one with init-config)")
            if args.command == "dump-schedule":
                cmd_dump_schedule(args, cfg, Path(args.out) if args.out else None)
                return 0
            out = Path(args.out or cfg.out_dir)
            with directory_lock(out):
                _bind_config(cfg, out)
                COMMANDS[args.command](args, cfg, out)
        return 0
    except (UserError, ConfigError, MethodMismatch, WavFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
