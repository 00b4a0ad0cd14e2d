"""Synthetic speech-like corpus, WAV I/O and random cropping.

Utterances are harmonic-plus-noise signals: a fundamental drawn per utterance
with slow vibrato, a decaying random harmonic spectrum, a slowly varying
syllable-like amplitude envelope and a little white noise. Every utterance is
a pure function of ``(seed, index)`` so corpora can be generated in any order
or in parallel.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PEAK = 0.9
_PCM_SCALE = 32768.0
_PCM_MAX = 1.0 - 2.0**-15


class WavFormatError(ValueError):
    """File is not mono 16-bit linear PCM RIFF/WAVE, or is truncated."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class CorpusSpec:
    num_utterances: int = 96
    duration_s_min: float = 1.0
    duration_s_max: float = 3.0
    f0_hz_min: float = 100.0
    f0_hz_max: float = 250.0
    num_harmonics: int = 12
    noise_level: float = 0.01
    seed: int = 0
    sample_rate_hz: int = 8000

    def validate(self):
        if self.num_utterances < 1:
            raise ValueError("num_utterances must be positive")
        if not 0 < self.duration_s_min <= self.duration_s_max:
            raise ValueError("need 0 < duration_s_min <= duration_s_max")
        if not 0 < self.f0_hz_min <= self.f0_hz_max:
            raise ValueError("need 0 < f0_hz_min <= f0_hz_max")
        if self.num_harmonics < 0:
            raise ValueError("num_harmonics must be non-negative")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.num_harmonics * self.f0_hz_max >= self.sample_rate_hz / 2:
            raise ValueError(
                f"highest harmonic {self.num_harmonics * self.f0_hz_max:g} Hz "
                f"is not below Nyquist ({self.sample_rate_hz / 2:g} Hz)"
            )
        return self


def _utterance_rng(seed: int, index: int) -> np.random.Generator:
    # keyed by (seed, index), never by shared generator state
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])


def utterance_params(spec: CorpusSpec, index: int) -> dict:
    """Per-utterance draws (duration, base f0, ...) for ``index``; used by the manifest."""
    spec.validate()
    if not 0 <= index < spec.num_utterances:
        raise IndexError(f"utterance index {index} out of range [0, {spec.num_utterances})")
    rng = _utterance_rng(spec.seed, index)
    duration = rng.uniform(spec.duration_s_min, spec.duration_s_max)
    f0 = rng.uniform(spec.f0_hz_min, spec.f0_hz_max)
    return {"rng": rng, "duration_s": float(duration), "f0_hz": float(f0)}


def synth_utterance(spec: CorpusSpec, index: int) -> Waveform:
    p = utterance_params(spec, index)
    rng = p["rng"]
    sr = spec.sample_rate_hz
    n = max(1, int(round(p["duration_s"] * sr)))
    t = np.arange(n) / sr

    # slow vibrato, clipped into the allowed f0 band
    vib_rate = rng.uniform(0.5, 2.5)
    vib_depth = rng.uniform(0.02, 0.08)
    f0 = p["f0_hz"] * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    f0 = np.clip(f0, spec.f0_hz_min, spec.f0_hz_max)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    # syllable-like envelope: a few raised bumps at 2..5 Hz, never fully silent
    env = np.full(n, 0.25)
    for _ in range(3):
        rate = rng.uniform(2.0, 5.0)
        env += rng.uniform(0.2, 0.5) * (0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))

    x = np.zeros(n)
    if spec.num_harmonics > 0:
        tilt = rng.uniform(0.1, 0.3)
        amps = np.exp(-tilt * np.arange(spec.num_harmonics)) * rng.uniform(0.5, 1.0, spec.num_harmonics)
        phases0 = rng.uniform(0, 2 * np.pi, spec.num_harmonics)
        # per-harmonic slow tremolo
        trem_rate = rng.uniform(0.3, 1.5, spec.num_harmonics)
        trem_phase = rng.uniform(0, 2 * np.pi, spec.num_harmonics)
        for h in range(spec.num_harmonics):
            trem = 1.0 + 0.3 * np.sin(2 * np.pi * trem_rate[h] * t + trem_phase[h])
            x += amps[h] * trem * np.sin((h + 1) * phase + phases0[h])
        x *= env
    if spec.noise_level > 0:
        x += spec.noise_level * rng.standard_normal(n)

    peak = np.max(np.abs(x))
    if peak > 0:
        x *= PEAK / peak
    return Waveform(x, sr)


def read_wav(path) -> Waveform:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError(f"{path}: data chunk before fmt chunk")
            tag, channels, rate, _, _, bits = fmt
            if tag != 1:
                raise WavFormatError(f"{path}: unsupported format tag {tag} (need PCM=1)")
            if channels != 1:
                raise WavFormatError(f"{path}: {channels} channels, only mono is supported")
            if bits != 16:
                raise WavFormatError(f"{path}: {bits}-bit samples, only 16-bit is supported")
            if len(body) < size or size % 2:
                raise WavFormatError(f"{path}: truncated data chunk")
            ints = np.frombuffer(body, dtype="<i2")
            if ints.size == 0:
                raise WavFormatError(f"{path}: empty data chunk")
            return Waveform(ints.astype(np.float64) / _PCM_SCALE, rate)
        pos += 8 + size + (size & 1)
    raise WavFormatError(f"{path}: no data chunk")


def to_pcm16(samples) -> np.ndarray:
    """Clamp to [-1, 1 - 2^-15] and round half away from zero to int16."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, _PCM_MAX) * _PCM_SCALE
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype("<i2")


def write_wav(waveform: Waveform, path):
    pcm = to_pcm16(waveform.samples).tobytes()
    sr = waveform.sample_rate_hz
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(pcm))
    Path(path).write_bytes(header + pcm)


def crop_offset(n: int, length: int, rng: np.random.Generator) -> int:
    if length < 1:
        raise ValueError(f"crop length must be positive, got {length}")
    if length > n:
        raise ValueError(f"crop length {length} exceeds sequence length {n}")
    return int(rng.integers(0, n - length + 1))


def crop_random(waveform: Waveform, length_samples: int, rng: np.random.Generator) -> Waveform:
    start = crop_offset(len(waveform), length_samples, rng)
    return Waveform(waveform.samples[start:start + length_samples], waveform.sample_rate_hz)


def generate_corpus(spec: CorpusSpec, out_dir) -> list[dict]:
    """Write ``utt_XXXXX.wav`` files plus ``manifest.jsonl``; returns the manifest records."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.num_utterances):
        wav = synth_utterance(spec, i)
        name = f"utt_{i:05d}.wav"
        write_wav(wav, out_dir / name)
        p = utterance_params(spec, i)
        records.append({
            "index": i,
            "duration_s": len(wav) / wav.sample_rate_hz,
            "f0_hz": p["f0_hz"],
            "path": name,
        })
    with open(out_dir / "manifest.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    logger.info("wrote %d utterances to %s", len(records), out_dir)
    return records


def read_manifest(corpus_dir) -> list[dict]:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    with open(manifest) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_corpus(corpus_dir, indices=None) -> list[Waveform]:
    corpus_dir = Path(corpus_dir)
    records = read_manifest(corpus_dir)
    if indices is not None:
        wanted = set(indices)
        records = [r for r in records if r["index"] in wanted]
    return [read_wav(corpus_dir / r["path"]) for r in records]

