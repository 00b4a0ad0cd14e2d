"""Run configuration: one JSON file with every key spelled out.

Parsing is strict. Every key must be present and unknown keys are rejected,
so a config file is a complete record of a run. ``default_config()`` holds
the desk-scale defaults; ``init-config`` writes them out in full.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .corpus import CorpusSpec
from .nnet.optim import PEAK_LR
from .resynth import TrainHyper
from .transform import REFERENCE_DIM, REFERENCE_FRAME_RATE_HZ, FrameConfig

CONFIG_VERSION = 1

# reference values of the full-scale system, recorded but not used
REFERENCE_SYSTEM = {
    "frame_rate_hz": REFERENCE_FRAME_RATE_HZ,
    "dim": REFERENCE_DIM,
    "num_layers": 8,
    "codebook_size": 1024,
    "bitrate_bps": 6000,
    "schedule_T": 1000,
    "beta_peak": 0.3,
    "warmup_steps": 32000,
    "peak_lr": dict(PEAK_LR),
    "weight_decay": 0.01,
    "nfe_list": [1, 4, 7, 16, 32],
}


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


@dataclass(frozen=True)
class CodecSection:
    frame_size: int = 64
    hop: int = 64
    dim: int = 64
    num_layers: int = 8
    codebook_size: int = 256
    kmeans_iters: int = 25
    train_utterances: int = 96
    seed: int = 0


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 1000
    beta_peak: float = 0.3
    beta_min: float = 1e-4


@dataclass(frozen=True)
class TrainSection:
    steps: int = 10000
    warmup_steps: int = 320
    batch_crops: int = 8
    crop_frames: int = 32
    weight_decay: float = 0.01
    hidden_dims: tuple[int, ...] = (256, 256, 256, 256)
    activation: str = "gelu"
    embed_dim: int = 32
    compute_dtype: str = "float32"
    peak_lr_c2f: float = PEAK_LR["c2f"]
    peak_lr_onestep: float = PEAK_LR["onestep"]
    peak_lr_bridge: float = PEAK_LR["bridge"]
    seed: int = 0
    log_every: int = 500

    def hyper(self, method: str, seed: int | None = None) -> TrainHyper:
        return TrainHyper(
            steps=self.steps, warmup_steps=self.warmup_steps, peak_lr=getattr(self, f"peak_lr_{method}"),
            batch_crops=self.batch_crops, crop_frames=self.crop_frames, weight_decay=self.weight_decay,
            hidden_dims=tuple(self.hidden_dims), activation=self.activation, embed_dim=self.embed_dim,
            seed=self.seed if seed is None else seed, log_every=self.log_every,
            compute_dtype=self.compute_dtype,
        )


@dataclass(frozen=True)
class EvalSection:
    nfe_list: tuple[int, ...] = (1, 4, 7, 16, 32)
    num_test_utterances: int = 16
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSpec = CorpusSpec(num_utterances=2000)
    codec: CodecSection = CodecSection()
    schedule: ScheduleSection = ScheduleSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    out_dir: str = "run"

    def validate(self) -> "RunConfig":
        self.corpus.validate()
        FrameConfig(self.codec.frame_size, self.codec.hop, self.codec.dim, self.corpus.sample_rate_hz)
        c, e = self.codec, self.eval
        if c.num_layers < 1 or c.codebook_size < 2 or c.kmeans_iters < 1:
            raise ConfigError("codec needs num_layers >= 1, codebook_size >= 2, kmeans_iters >= 1")
        if not 0 < e.num_test_utterances < self.corpus.num_utterances:
            raise ConfigError("num_test_utterances must leave at least one training utterance")
        if not 0 < c.train_utterances <= self.num_train_utterances:
            raise ConfigError(f"codec.train_utterances must be in [1, {self.num_train_utterances}]")
        if not e.nfe_list or any(not 1 <= n <= self.schedule.T for n in e.nfe_list):
            raise ConfigError(f"nfe_list entries must be in [1, {self.schedule.T}]")
        t = self.train
        if not 0 < t.warmup_steps < t.steps:
            raise ConfigError("need 0 < train.warmup_steps < train.steps")
        if t.compute_dtype not in ("float32", "float64"):
            raise ConfigError("train.compute_dtype must be float32 or float64")
        if min(t.batch_crops, t.crop_frames, t.embed_dim, *t.hidden_dims) < 1 or t.embed_dim % 2:
            raise ConfigError("batch, crop, hidden and (even) embedding sizes must be positive")
        return self

    @property
    def frame_config(self) -> FrameConfig:
        return FrameConfig(self.codec.frame_size, self.codec.hop, self.codec.dim, self.corpus.sample_rate_hz)

    @property
    def num_train_utterances(self) -> int:
        return self.corpus.num_utterances - self.eval.num_test_utterances

    def train_indices(self) -> list[int]:
        return list(range(self.num_train_utterances))

    def test_indices(self) -> list[int]:
        return list(range(self.num_train_utterances, self.corpus.num_utterances))

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "corpus": asdict(self.corpus),
            "codec": asdict(self.codec),
            "schedule": asdict(self.schedule),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
            "reference_system": REFERENCE_SYSTEM,
        }
        d["train"]["hidden_dims"] = list(self.train.hidden_dims)
        d["eval"]["nfe_list"] = list(self.eval.nfe_list)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _exact_keys(d, {"version", "corpus", "codec", "schedule", "train", "eval", "out_dir",
                        "reference_system"}, "config")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"config version {d['version']}, expected {CONFIG_VERSION}")
        if not isinstance(d["out_dir"], str):
            raise ConfigError("out_dir must be a string")
        cfg = cls(
            corpus=_section(CorpusSpec, d["corpus"], "corpus"),
            codec=_section(CodecSection, d["codec"], "codec"),
            schedule=_section(ScheduleSection, d["schedule"], "schedule"),
            train=_section(TrainSection, d["train"], "train"),
            eval=_section(EvalSection, d["eval"], "eval"),
            out_dir=d["out_dir"],
        )
        try:
            return cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(self.to_json())

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with whole sections or ``section.key`` values replaced, e.g. ``train={"seed": 3}``."""
        d = self.to_dict()
        for name, changes in sections.items():
            if isinstance(changes, dict):
                d[name] = {**d[name], **changes}
            else:
                d[name] = changes
        return RunConfig.from_dict(d)

    def digest(self) -> str:
        """Hash of everything that affects results (``out_dir`` excluded)."""
        d = self.to_dict()
        del d["out_dir"]
        return _digest(d)

    def lineage_digest(self) -> str:
        """Hash of the sections a trained model depends on besides its own training knobs."""
        d = self.to_dict()
        lineage = {k: d[k] for k in ("corpus", "codec", "schedule")}
        lineage["num_test_utterances"] = d["eval"]["num_test_utterances"]
        return _digest(lineage)


def default_config() -> RunConfig:
    return RunConfig().validate()


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _exact_keys(d, expected, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    missing, extra = expected - d.keys(), d.keys() - expected
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _section(cls, d, where):
    _exact_keys(d, {f.name for f in fields(cls)}, where)
    defaults = cls()
    values = {}
    for f in fields(cls):
        default, v = getattr(defaults, f.name), d[f.name]
        if isinstance(default, bool):
            ok = isinstance(v, bool)
        elif isinstance(default, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(default, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v)
        elif isinstance(default, str):
            ok = isinstance(v, str)
        else:  # integer tuples
            ok = isinstance(v, list) and all(isinstance(a, int) and not isinstance(a, bool) for a in v)
            v = tuple(v) if ok else v
        if not ok:
            raise ConfigError(f"{where}.{f.name}: unexpected value {d[f.name]!r}")
        values[f.name] = v
    return cls(**values)
