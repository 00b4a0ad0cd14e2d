"""Resynthesis from first-layer RVQ codes.

Three strategies, all fed only the layer-1 code vectors:

* ``c2f``: predict codes 2..N one stage at a time (one forward per stage),
  each stage seeing the running sum of the codes chosen so far;
* ``onestep``: regress the pre-quantized embedding directly (one forward);
* ``bridge``: sample the paired Schrodinger bridge from the layer-1
  embedding back to the pre-quantized embedding (one forward per step).

``baseline`` decodes the layer-1 codes as they are. Every network sees a
frame plus its two neighbours on each side (zeros past the sequence ends).
One-step and bridge models work in per-feature standardized coordinates
computed from the training embeddings; c2f standardizes its inputs the same
way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import bridge as sb
from .corpus import Waveform
from .nnet import (
    AdamHyper,
    AdamState,
    NetSpec,
    ParameterSet,
    adam_step,
    forward,
    init_params,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    stage_table_shape,
    time_embedding,
    value_and_grad,
)
from .nnet.autodiff import log_softmax
from .rvq import CodeSequence, RVQModel, dequantize, quantize
from .transform import FrameConfig, decode_frames, encode_frames

logger = logging.getLogger(__name__)

METHODS = ("baseline", "c2f", "onestep", "bridge")
CONTEXT_RADIUS = 2


class MethodMismatch(ValueError):
    """The model handed to ``resynthesize`` does not implement the requested method."""


def context_window(x: np.ndarray, radius: int = CONTEXT_RADIUS) -> np.ndarray:
    """Concatenate each row with its ``radius`` neighbours on both sides, zero-padded: (L, (2r+1) d)."""
    L, d = x.shape
    padded = np.zeros((L + 2 * radius, d))
    padded[radius:radius + L] = x
    return np.concatenate([padded[j:j + L] for j in range(2 * radius + 1)], axis=1)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "Standardizer":
        mean = frames.mean(axis=0)
        std = np.maximum(frames.std(axis=0), 1e-8)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, y):
        return y * self.std + self.mean


@dataclass
class TrainHyper:
    steps: int = 4000
    warmup_steps: int = 128
    peak_lr: float = 5e-4
    batch_crops: int = 8
    crop_frames: int = 32
    weight_decay: float = 0.01
    hidden_dims: tuple[int, ...] = (256, 256, 256, 256)
    activation: str = "gelu"
    embed_dim: int = 32
    seed: int = 0
    log_every: int = 100
    compute_dtype: str = "float32"
    layer_norm: bool = True


@dataclass
class TrainingPair:
    """One utterance: pre-quantized embeddings and their RVQ codes."""

    z: np.ndarray
    codes: CodeSequence


def make_pairs(waveforms, cfg: FrameConfig, rvq: RVQModel) -> list[TrainingPair]:
    pairs = []
    for w in waveforms:
        z = encode_frames(w, cfg).values
        codes, _ = quantize(rvq, z)
        pairs.append(TrainingPair(z, codes))
    return pairs


# models ------------------------------------------------------------------


@dataclass
class _NetModel:
    spec: NetSpec
    params: ParameterSet
    standardizer: Standardizer
    forward_calls: int = field(default=0, compare=False)

    def _net(self, x, **kw):
        self.forward_calls += 1
        return forward(self.params, self.spec, x, **kw).data


@dataclass
class OneStepModel(_NetModel):
    method = "onestep"

    def predict(self, x1: np.ndarray) -> np.ndarray:
        """Raw layer-1 embeddings (L x d) -> raw estimate of z; one network forward."""
        inp = context_window(self.standardizer.apply(x1))
        return self.standardizer.invert(self._net(inp))


@dataclass
class BridgeModel(_NetModel):
    method = "bridge"
    sched: sb.NoiseSchedule | None = None

    def eps(self, x: np.ndarray, k: int, x1: np.ndarray) -> np.ndarray:
        """Denoiser in standardized coordinates; one network forward."""
        cond = time_embedding(self.sched.time(k), self.spec.cond_dim)
        return self._net(context_window(x), cond=cond, aux=context_window(x1))


@dataclass
class CoarseToFineModel(_NetModel):
    method = "c2f"
    num_layers: int = 8

    def logits(self, cum: np.ndarray, stage: int) -> np.ndarray:
        """Raw running code sum (L x d) -> logits over layer ``stage`` codes; one network forward."""
        if not 2 <= stage <= self.num_layers:
            raise ValueError(f"stage must be in [2, {self.num_layers}]")
        inp = context_window(self.standardizer.apply(cum))
        cond = self.params["stage.table"][stage - 2][None, :]
        return self._net(inp, cond=cond, head=stage - 2)


# training ------------------------------------------------------------------


def _check_dataset(pairs):
    if not pairs:
        raise ValueError("empty dataset")
    d = pairs[0].z.shape[1]
    for p in pairs:
        if p.z.ndim != 2 or p.z.shape[1] != d or len(p.codes) != p.z.shape[0]:
            raise ValueError("inconsistent dataset shapes")
    return d


def _sample_crops(pairs, hyper: TrainHyper, rng):
    """``(utterance index, start, length)`` for one batch of equal-length crops."""
    out = []
    for _ in range(hyper.batch_crops):
        u = int(rng.integers(len(pairs)))
        L = pairs[u].z.shape[0]
        n = min(hyper.crop_frames, L)
        start = int(rng.integers(0, L - n + 1))
        out.append((u, start, n))
    return out


def _optimize(params: ParameterSet, batch_loss, hyper: TrainHyper, rng, name: str):
    state = AdamState.zeros(params.values.size)
    dtype = np.dtype(hyper.compute_dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"compute_dtype must be float32 or float64, got {hyper.compute_dtype!r}")
    losses = []
    for step in range(1, hyper.steps + 1):
        lr = lr_at(step, hyper.peak_lr, hyper.warmup_steps, hyper.steps)
        loss, grad = value_and_grad(params, lambda leaves: batch_loss(leaves, rng), dtype=dtype)
        adam_step(params.values, grad, state, AdamHyper(lr=lr, weight_decay=hyper.weight_decay))
        losses.append(loss)
        if hyper.log_every and step % hyper.log_every == 0:
            logger.info("%s step %d/%d loss %.5f lr %.2e", name, step, hyper.steps, loss, lr)
    # snap to the float32 checkpoint precision so saved and in-memory models agree
    params.values[:] = params.values.astype(np.float32).astype(np.float64)
    return state, losses


def _code1_vectors(rvq: RVQModel, codes: CodeSequence) -> np.ndarray:
    return rvq.codebooks[0].codes[codes.indices[:, 0]]


def _span(L: int, s: int, n: int, r: int = CONTEXT_RADIUS):
    """Rows ``[lo, hi)`` that the context windows of rows ``s .. s+n-1`` read."""
    return max(s - r, 0), min(s + n + r, L)


def _crop_windows(block: np.ndarray, lo: int, s: int, n: int, r: int = CONTEXT_RADIUS) -> np.ndarray:
    """Rows ``s .. s+n-1`` of ``context_window(seq)``, given ``block = seq[lo:hi]`` from :func:`_span`.

    Built per crop so training never materializes windows for the whole corpus.
    """
    ext = np.zeros((n + 2 * r, block.shape[1]))
    a = lo - (s - r)
    ext[a:a + len(block)] = block
    return np.concatenate([ext[j:j + n] for j in range(2 * r + 1)], axis=1)


def train_one_step(pairs, rvq: RVQModel, hyper: TrainHyper):
    """Returns ``(model, adam_state, losses)``; MSE between prediction and standardized z."""
    d = _check_dataset(pairs)
    rng = np.random.default_rng(hyper.seed)
    stdz = Standardizer.fit(np.concatenate([p.z for p in pairs]))
    w = 2 * CONTEXT_RADIUS + 1
    spec = NetSpec(w * d, hyper.hidden_dims, d, activation=hyper.activation, layer_norm=hyper.layer_norm)
    params = init_params(spec, rng)
    inputs = [stdz.apply(_code1_vectors(rvq, p.codes)) for p in pairs]
    targets = [stdz.apply(p.z) for p in pairs]

    def windows(u, s, n):
        lo, hi = _span(len(inputs[u]), s, n)
        return _crop_windows(inputs[u][lo:hi], lo, s, n)

    def batch_loss(leaves, rng):
        crops = _sample_crops(pairs, hyper, rng)
        x = np.concatenate([windows(u, s, n) for u, s, n in crops])
        y = np.concatenate([targets[u][s:s + n] for u, s, n in crops])
        diff = forward(leaves, spec, x) - y
        return (diff * diff).mean()

    state, losses = _optimize(params, batch_loss, hyper, rng, "onestep")
    return OneStepModel(spec, params, stdz), state, losses


def train_bridge(pairs, rvq: RVQModel, sched: sb.NoiseSchedule, hyper: TrainHyper):
    """Stochastic minimisation of the bridge regression loss with x0 = z, x1 = layer-1 code vectors.

    Each crop draws its own grid time; the bridge state is sampled over the
    crop plus its context margin so neighbours carry matching noise.
    """
    d = _check_dataset(pairs)
    rng = np.random.default_rng(hyper.seed)
    stdz = Standardizer.fit(np.concatenate([p.z for p in pairs]))
    w = 2 * CONTEXT_RADIUS + 1
    spec = NetSpec(w * d, hyper.hidden_dims, d, cond_dim=hyper.embed_dim,
                   activation=hyper.activation, aux_dim=w * d, layer_norm=hyper.layer_norm)
    params = init_params(spec, rng)
    x0s = [stdz.apply(p.z) for p in pairs]
    x1s = [stdz.apply(_code1_vectors(rvq, p.codes)) for p in pairs]

    def batch_loss(leaves, rng):
        crops = _sample_crops(pairs, hyper, rng)
        xs, auxs, conds, targets = [], [], [], []
        for u, s, n in crops:
            x0, x1 = x0s[u], x1s[u]
            lo, hi = _span(x0.shape[0], s, n)
            k = int(sb.sample_train_step(sched, rng))
            # the state is drawn over the context margin too, so neighbours carry matching noise
            xt = sb.sample_xt(x0[lo:hi], x1[lo:hi], k, sched, rng)
            xs.append(_crop_windows(xt, lo, s, n))
            auxs.append(_crop_windows(x1[lo:hi], lo, s, n))
            conds.append(np.repeat(time_embedding(sched.time(k), hyper.embed_dim), n, axis=0))
            targets.append(sb.sb_target(xt[s - lo:s - lo + n], x0[s:s + n], k, sched))
        pred = forward(leaves, spec, np.concatenate(xs), cond=np.concatenate(conds),
                       aux=np.concatenate(auxs))
        diff = pred - np.concatenate(targets)
        return (diff * diff).mean()

    state, losses = _optimize(params, batch_loss, hyper, rng, "bridge")
    return BridgeModel(spec, params, stdz, sched=sched), state, losses


def train_coarse_to_fine(pairs, rvq: RVQModel, hyper: TrainHyper, zero_heads: bool = True):
    """Cross-entropy on layer-i codes given the teacher-forced sum of codes 1..i-1.

    Every crop draws its stage uniformly from 2..N.
    """
    d = _check_dataset(pairs)
    N, V = rvq.num_layers, rvq.codebook_size
    if N < 2:
        raise ValueError("coarse-to-fine needs at least two RVQ layers")
    for p in pairs:
        p.codes.check(rvq)
    rng = np.random.default_rng(hyper.seed)
    stdz = Standardizer.fit(np.concatenate([p.z for p in pairs]))
    w = 2 * CONTEXT_RADIUS + 1
    spec = NetSpec(w * d, hyper.hidden_dims, V, cond_dim=hyper.embed_dim,
                   activation=hyper.activation, num_heads=N - 1, layer_norm=hyper.layer_norm)
    params = init_params(spec, rng, extra={"stage.table": stage_table_shape(N, hyper.embed_dim)},
                         zero_output=zero_heads)
    def cum_windows(u, s, n, stage):
        # context windows of the teacher-forced sum of codes 1 .. stage-1
        idx = pairs[u].codes.indices
        lo, hi = _span(len(idx), s, n)
        cum = np.zeros((hi - lo, d))
        for i in range(1, stage):
            cum = cum + rvq.codebooks[i - 1].codes[idx[lo:hi, i - 1]]
        return _crop_windows(stdz.apply(cum), lo, s, n)

    def batch_loss(leaves, rng):
        crops = _sample_crops(pairs, hyper, rng)
        xs, heads, ys = [], [], []
        for u, s, n in crops:
            stage = int(rng.integers(2, N + 1))
            xs.append(cum_windows(u, s, n, stage))
            heads.append(np.full(n, stage - 2))
            ys.append(pairs[u].codes.indices[s:s + n, stage - 1])
        head = np.concatenate(heads)
        cond = leaves["stage.table"][head]
        logits = forward(leaves, spec, np.concatenate(xs), cond=cond, head=head)
        y = np.concatenate(ys)
        logp = log_softmax(logits)
        return -(logp[np.arange(y.size), y]).mean()

    state, losses = _optimize(params, batch_loss, hyper, rng, "c2f")
    return CoarseToFineModel(spec, params, stdz, num_layers=N), state, losses


# inference -------------------------------------------------------------------


@dataclass
class Inference:
    embeddings: np.ndarray
    nfe: int
    codes: CodeSequence | None = None


def infer_one_step(model, codes_layer1, rvq: RVQModel) -> Inference:
    idx = np.asarray(codes_layer1, dtype=np.int64)
    x1 = rvq.codebooks[0].codes[idx]
    before = model.forward_calls
    z_hat = model.predict(x1)
    if z_hat.shape != x1.shape:
        raise ValueError(f"model output shape {z_hat.shape} != {x1.shape}")
    return Inference(z_hat, model.forward_calls - before)


def infer_bridge(model, codes_layer1, rvq: RVQModel, nfe: int, rng: np.random.Generator) -> Inference:
    idx = np.asarray(codes_layer1, dtype=np.int64)
    x1 = model.standardizer.apply(rvq.codebooks[0].codes[idx])
    before = model.forward_calls
    x0 = sb.ddpm_backward(model.eps, x1, nfe, model.sched, rng)
    return Inference(model.standardizer.invert(x0), model.forward_calls - before)


def infer_coarse_to_fine(model, codes_layer1, rvq: RVQModel, mode: str = "greedy",
                         temperature: float = 1.0, rng: np.random.Generator | None = None) -> Inference:
    """Predict layers 2..N in turn, then return the sum of all N chosen code vectors."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "sample":
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        if rng is None:
            raise ValueError("sampling needs a random generator")
    idx1 = np.asarray(codes_layer1, dtype=np.int64)
    if idx1.min() < 0 or idx1.max() >= rvq.codebook_size:
        raise IndexError("layer-1 index outside codebook")
    chosen = [idx1]
    cum = rvq.codebooks[0].codes[idx1].copy()
    before = model.forward_calls
    for stage in range(2, rvq.num_layers + 1):
        logits = model.logits(cum, stage)
        if mode == "greedy":
            idx = np.argmax(logits, axis=1)
        else:
            scaled = logits / temperature
            scaled = scaled - scaled.max(axis=1, keepdims=True)
            p = np.exp(scaled)
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random((p.shape[0], 1))
            idx = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)
        chosen.append(idx)
        cum = cum + rvq.codebooks[stage - 1].codes[idx]
    codes = CodeSequence(np.stack(chosen, axis=1))
    return Inference(cum, model.forward_calls - before, codes)


@dataclass
class ResynthResult:
    waveform: Waveform
    nfe: int
    embeddings: np.ndarray
    codes: CodeSequence
    predicted_codes: CodeSequence | None = None


def resynthesize(method: str, waveform: Waveform, cfg: FrameConfig, rvq: RVQModel, model=None,
                 nfe: int | None = None, rng: np.random.Generator | None = None) -> ResynthResult:
    """encode -> quantize -> keep layer-1 codes -> method estimate -> decode.

    ``nfe`` is only used by ``bridge``; the other methods have a fixed cost
    (0 for baseline, 1 for onestep, N-1 for c2f). The reported NFE is the
    number of network forwards actually made.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method != "baseline" and getattr(model, "method", None) != method:
        raise MethodMismatch(f"model of type {type(model).__name__} cannot run method {method!r}")
    z = encode_frames(waveform, cfg).values
    codes, _ = quantize(rvq, z)
    layer1 = codes.indices[:, 0]
    predicted = None
    if method == "baseline":
        est, used = dequantize(rvq, codes, upto_layer=1), 0
    elif method == "onestep":
        inf = infer_one_step(model, layer1, rvq)
        est, used = inf.embeddings, inf.nfe
    elif method == "c2f":
        inf = infer_coarse_to_fine(model, layer1, rvq)
        est, used, predicted = inf.embeddings, inf.nfe, inf.codes
    else:
        if nfe is None or rng is None:
            raise ValueError("bridge resynthesis needs nfe and rng")
        inf = infer_bridge(model, layer1, rvq, nfe, rng)
        est, used = inf.embeddings, inf.nfe
    return ResynthResult(decode_frames(est, cfg), used, est, codes, predicted)


# checkpoints -----------------------------------------------------------------


def save_model(path, model, state: AdamState | None = None, meta: dict | None = None):
    info = {
        "method": model.method,
        "std_mean": [float(v) for v in model.standardizer.mean],
        "std_scale": [float(v) for v in model.standardizer.std],
        "context_radius": CONTEXT_RADIUS,
    }
    if isinstance(model, CoarseToFineModel):
        info["num_layers"] = model.num_layers
    if isinstance(model, BridgeModel):
        info["beta"] = [float(b) for b in model.sched.beta]
        info["schedule_digest"] = model.sched.digest()
    info.update(meta or {})
    save_checkpoint(path, model.spec, model.params, state, info)


def load_model(path):
    """Returns ``(model, meta)`` for any saved resynthesis model."""
    spec, params, _, meta = load_checkpoint(path)
    stdz = Standardizer(np.array(meta["std_mean"]), np.array(meta["std_scale"]))
    method = meta.get("method")
    if method == "onestep":
        model = OneStepModel(spec, params, stdz)
    elif method == "bridge":
        model = BridgeModel(spec, params, stdz, sched=sb.NoiseSchedule.from_beta(meta["beta"]))
    elif method == "c2f":
        model = CoarseToFineModel(spec, params, stdz, num_layers=meta["num_layers"])
    else:
        raise ValueError(f"{path}: unknown method {method!r}")
    return model, meta

