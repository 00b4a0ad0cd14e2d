"""Objective evaluation: SI-SNR, ESTOI, code accuracy, embedding MSE and the evaluation suite."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Waveform
from .rvq import CodeSequence, RVQModel, dequantize, quantize
from .transform import FrameConfig, decode_frames, encode_frames

logger = logging.getLogger(__name__)

SI_SNR_CAP_DB = 100.0

# ESTOI analysis parameters at 8 kHz
ESTOI_FRAME = 256
ESTOI_HOP = 128
ESTOI_NFFT = 512
ESTOI_BANDS = 15
ESTOI_MIN_CENTER_HZ = 150.0
ESTOI_SEGMENT = 30

REPORT_COLUMNS = (
    "method", "nfe", "n_utts", "si_snr_db_mean", "si_snr_db_std",
    "estoi_mean", "estoi_std", "embed_mse", "code_acc",
)
LAYER_SWEEP_COLUMNS = ("decoder_input", "layers", "n_utts", "si_snr_db_mean", "si_snr_db_std",
                       "estoi_mean", "estoi_std")


def _pair(estimate, reference):
    e = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, float)
    r = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, float)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    return e, r


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB on mean-removed signals, capped at +100 dB."""
    est, ref = _pair(estimate, reference)
    if est.size < 2:
        raise ValueError("need at least two samples")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference is zero after mean removal")
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    t_energy, n_energy = np.dot(target, target), np.dot(noise, noise)
    if n_energy == 0:
        return SI_SNR_CAP_DB
    if t_energy == 0:
        # estimate orthogonal to the reference
        return -SI_SNR_CAP_DB
    return float(min(SI_SNR_CAP_DB, 10 * np.log10(t_energy / n_energy)))


def third_octave_bands(sample_rate_hz: int, nfft: int = ESTOI_NFFT, num_bands: int = ESTOI_BANDS,
                       min_center_hz: float = ESTOI_MIN_CENTER_HZ) -> np.ndarray:
    """(num_bands, nfft//2 + 1) 0/1 matrix; edges snap to the nearest FFT bin, top band clipped at Nyquist."""
    freqs = np.linspace(0, sample_rate_hz, nfft + 1)[: nfft // 2 + 1]
    centers = min_center_hz * 2.0 ** (np.arange(num_bands) / 3.0)
    lo = centers * 2.0 ** (-1.0 / 6.0)
    hi = np.minimum(centers * 2.0 ** (1.0 / 6.0), sample_rate_hz / 2.0)
    bands = np.zeros((num_bands, freqs.size))
    for b in range(num_bands):
        i_lo = int(np.argmin((freqs - lo[b]) ** 2))
        i_hi = int(np.argmin((freqs - hi[b]) ** 2))
        if b == num_bands - 1 and hi[b] >= sample_rate_hz / 2.0:
            i_hi = freqs.size
        bands[b, i_lo:i_hi] = 1.0
    return bands


def _band_envelopes(x, bands):
    n_frames = (x.size - ESTOI_FRAME) // ESTOI_HOP + 1
    win = np.hanning(ESTOI_FRAME + 2)[1:-1]
    idx = np.arange(ESTOI_FRAME)[None, :] + ESTOI_HOP * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * win, n=ESTOI_NFFT, axis=1)
    return np.sqrt((np.abs(spec) ** 2) @ bands.T).T  # (bands, frames)


def _normalize_rows(a):
    a = a - a.mean(axis=-1, keepdims=True)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(n > 0, n, 1.0)


def estoi(estimate, reference, sample_rate_hz: int | None = None) -> float:
    """Extended short-time objective intelligibility.

    Band envelopes from 256-sample Hann frames (50 % overlap, 512-point FFT)
    pooled into 15 one-third-octave bands from 150 Hz. Every run of 30
    consecutive frames (sliding by one frame) forms a patch; each patch is
    normalized along time per band, then across bands per frame, and the
    score is the mean per-frame correlation, averaged over patches.
    """
    if isinstance(estimate, Waveform) and isinstance(reference, Waveform):
        if estimate.sample_rate_hz != reference.sample_rate_hz:
            raise ValueError("sample-rate mismatch")
        sample_rate_hz = reference.sample_rate_hz
    if sample_rate_hz is None:
        raise ValueError("sample rate required for raw arrays")
    est, ref = _pair(estimate, reference)
    min_len = ESTOI_FRAME + (ESTOI_SEGMENT - 1) * ESTOI_HOP
    if ref.size < min_len:
        raise ValueError(f"signal of {ref.size} samples is shorter than one segment ({min_len})")
    bands = third_octave_bands(sample_rate_hz)
    X = _band_envelopes(ref, bands)
    Y = _band_envelopes(est, bands)
    n_seg = X.shape[1] - ESTOI_SEGMENT + 1
    # (segments, bands, frames) patches
    seg_idx = np.arange(n_seg)[:, None] + np.arange(ESTOI_SEGMENT)[None, :]
    xs = _normalize_rows(X[:, seg_idx].transpose(1, 0, 2))
    ys = _normalize_rows(Y[:, seg_idx].transpose(1, 0, 2))
    xs = _normalize_rows(xs.transpose(0, 2, 1))
    ys = _normalize_rows(ys.transpose(0, 2, 1))
    per_segment = (xs * ys).sum(axis=2).mean(axis=1)
    return float(np.clip(per_segment.mean(), -1.0, 1.0))


def code_accuracy(predicted: CodeSequence, truth: CodeSequence) -> np.ndarray:
    p, t = predicted.indices, truth.indices
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.shape[0] == 0:
        raise ValueError("empty code sequences")
    return (p == t).mean(axis=0)


def embed_mse(estimate, truth) -> float:
    e = getattr(estimate, "values", estimate)
    t = getattr(truth, "values", truth)
    e, t = np.asarray(e, float), np.asarray(t, float)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {t.shape}")
    return float(np.mean((e - t) ** 2))


# evaluation suite ---------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    nfe: int | str
    si_snr: list = field(default_factory=list)
    estoi: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    code_acc: list = field(default_factory=list)

    def add(self, est: Waveform, ref: Waveform, emb_est=None, emb_ref=None, acc=None):
        self.si_snr.append(si_snr(est, ref))
        self.estoi.append(estoi(est, ref))
        if emb_est is not None:
            self.mse.append(embed_mse(emb_est, emb_ref))
        if acc is not None:
            self.code_acc.append(acc)

    def summary(self) -> dict:
        if not self.si_snr:
            raise ValueError(f"row {self.method}/{self.nfe} has no utterances")
        out = {
            "method": self.method,
            "nfe": self.nfe,
            "n_utts": len(self.si_snr),
            "si_snr_db_mean": float(np.mean(self.si_snr)),
            "si_snr_db_std": float(np.std(self.si_snr)),
            "estoi_mean": float(np.mean(self.estoi)),
            "estoi_std": float(np.std(self.estoi)),
            "embed_mse": float(np.mean(self.mse)) if self.mse else None,
            "code_acc": [float(a) for a in np.mean(self.code_acc, axis=0)] if self.code_acc else None,
        }
        return out


@dataclass
class EvalReport:
    rows: list[dict]
    layer_sweep: list[dict]
    header: dict

    def row(self, method: str, nfe=None) -> dict:
        for r in self.rows:
            if r["method"] == method and (nfe is None or r["nfe"] == nfe):
                return r
        raise KeyError((method, nfe))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.header):
            buf.write(f"# {key}: {self.header[key]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def layer_sweep_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LAYER_SWEEP_COLUMNS)
        for r in self.layer_sweep:
            w.writerow([_fmt(r[c]) for c in LAYER_SWEEP_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"header": self.header, "rows": self.rows, "layer_sweep": self.layer_sweep},
                          indent=2, sort_keys=True)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(repr(float(a)) for a in v)
    return str(v)


def _trimmed(ref: Waveform, n: int) -> Waveform:
    return Waveform(ref.samples[:n], ref.sample_rate_hz)


def eval_suite(models: dict, test_waveforms, cfg: FrameConfig, rvq: RVQModel, nfe_list,
               seed: int = 0) -> EvalReport:
    """Table-style evaluation of every method plus baseline, toplines and ground truth.

    ``models`` maps method name (``c2f``, ``onestep``, ``bridge``) to a
    trained model; missing methods are skipped. Bridge rows are produced for
    every NFE in ``nfe_list``, each utterance using the generator seeded by
    ``(seed, utterance, nfe)``. References are trimmed to the frames the
    transform covers.
    """
    from .resynth import resynthesize

    N = rvq.num_layers
    rows = {"ground_truth": ReportRow("ground_truth", ""), "baseline": ReportRow("baseline", 0)}
    if "c2f" in models:
        rows["c2f"] = ReportRow("c2f", N - 1)
    if "onestep" in models:
        rows["onestep"] = ReportRow("onestep", 1)
    if "bridge" in models:
        for nfe in nfe_list:
            rows[f"bridge/{nfe}"] = ReportRow("bridge", int(nfe))
    rows["topline_rvq_all"] = ReportRow(f"topline_rvq_{N}", "")
    rows["topline_z"] = ReportRow("topline_z", "")
    sweep = [ReportRow(f"rvq_sum_1..{i}", i) for i in range(1, N + 1)] + [ReportRow("z", "")]

    for u, wav in enumerate(test_waveforms):
        z = encode_frames(wav, cfg).values
        codes, _ = quantize(rvq, z)
        ref = _trimmed(wav, z.shape[0] * cfg.hop)
        rows["ground_truth"].add(ref, ref)
        for i in range(1, N + 1):
            emb = dequantize(rvq, codes, upto_layer=i)
            sweep[i - 1].add(decode_frames(emb, cfg), ref)
            if i == 1:
                rows["baseline"].add(decode_frames(emb, cfg), ref, emb, z)
            if i == N:
                rows["topline_rvq_all"].add(decode_frames(emb, cfg), ref, emb, z)
        rows["topline_z"].add(decode_frames(z, cfg), ref, z, z)
        sweep[N].add(decode_frames(z, cfg), ref)

        for method in ("c2f", "onestep"):
            if method in models:
                res = resynthesize(method, wav, cfg, rvq, models[method])
                acc = code_accuracy(res.predicted_codes, codes)[1:] if res.predicted_codes is not None else None
                rows[method].add(res.waveform, ref, res.embeddings, z, acc)
        if "bridge" in models:
            for nfe in nfe_list:
                rng = np.random.default_rng([seed, u, int(nfe)])
                res = resynthesize("bridge", wav, cfg, rvq, models["bridge"], nfe=int(nfe), rng=rng)
                rows[f"bridge/{nfe}"].add(res.waveform, ref, res.embeddings, z)

    header = {
        "estoi_params": (f"fs={cfg.sample_rate_hz}Hz frame={ESTOI_FRAME} hop={ESTOI_HOP} nfft={ESTOI_NFFT} "
                         f"bands={ESTOI_BANDS} from {ESTOI_MIN_CENTER_HZ:g}Hz (top band clipped at Nyquist; "
                         f"reference design is 10 kHz) segment={ESTOI_SEGMENT}"),
        "si_snr_cap_db": SI_SNR_CAP_DB,
        "n_test_utterances": len(test_waveforms),
    }
    order = ["ground_truth", "baseline"] + [k for k in rows if k.startswith(("c2f", "onestep", "bridge"))]
    order += ["topline_rvq_all", "topline_z"]
    sweep_rows = []
    for r in sweep:
        s = r.summary()
        sweep_rows.append({
            "decoder_input": s["method"], "layers": s["nfe"], "n_utts": s["n_utts"],
            "si_snr_db_mean": s["si_snr_db_mean"], "si_snr_db_std": s["si_snr_db_std"],
            "estoi_mean": s["estoi_mean"], "estoi_std": s["estoi_std"],
        })
    return EvalReport([rows[k].summary() for k in order], sweep_rows, header)
