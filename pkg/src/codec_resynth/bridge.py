"""Paired-data Schrodinger bridge: schedule, marginal sampling, target and backward sampler.

With zero base drift and a Dirac start at ``x0`` the bridge between a pair
``(x0, x1)`` is Gaussian at every time. Writing ``s2(t)`` for the integral of
the diffusion coefficient from 0 to t and ``sb2(t)`` for the integral from t
to 1::

    x_t ~ N( (sb2 x0 + s2 x1) / (sb2 + s2),  s2 sb2 / (sb2 + s2) I )

and the denoiser learns ``(x_t - x0) / sqrt(s2(t))``. Time lives on the grid
``k / T``; every function takes the integer grid index ``k`` so endpoints are
hit exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[k-1]`` is the diffusion coefficient on ((k-1)/T, k/T]; ``sigma2``/``sigma2_bar`` have T+1 entries."""

    beta: np.ndarray
    sigma2: np.ndarray
    sigma2_bar: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size

    @classmethod
    def from_beta(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1 or np.any(beta < 0) or not np.all(np.isfinite(beta)):
            raise ValueError("beta must be a non-empty vector of finite non-negative values")
        if not beta.sum() > 0:
            raise ValueError("schedule needs positive total diffusion")
        T = beta.size
        sigma2 = np.concatenate([[0.0], np.cumsum(beta / T)])
        sigma2_bar = sigma2[-1] - sigma2
        for a in (beta, sigma2, sigma2_bar):
            a.setflags(write=False)
        return cls(beta, sigma2, sigma2_bar)

    def time(self, k: int) -> float:
        return self.check_step(k) / self.T

    def check_step(self, k) -> int:
        if isinstance(k, (float, np.floating)) and not float(k).is_integer():
            raise ValueError(f"grid index must be an integer, got {k}")
        k = int(k)
        if not 0 <= k <= self.T:
            raise ValueError(f"grid index {k} outside [0, {self.T}]")
        return k

    def step_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is off the grid."""
        k = round(t * self.T)
        if abs(k - t * self.T) > 1e-9:
            raise ValueError(f"time {t} is not on the 1/{self.T} grid")
        return self.check_step(k)

    def digest(self) -> str:
        return hashlib.sha256(self.beta.astype("<f8").tobytes()).hexdigest()[:16]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t", "beta", "sigma2", "sigma2_bar"])
        for k in range(self.T + 1):
            beta = repr(float(self.beta[k - 1])) if k > 0 else ""
            w.writerow([k, repr(k / self.T), beta, repr(float(self.sigma2[k])), repr(float(self.sigma2_bar[k]))])
        return buf.getvalue()


def make_symmetric_schedule(T: int = 1000, beta_peak: float = 0.3, beta_min: float = 1e-4) -> NoiseSchedule:
    """Triangular schedule: beta rises linearly from ``beta_min`` to ``beta_peak`` at t = 1/2 and falls back.

    Each interval takes the value at its midpoint, so ``beta[k] == beta[T-1-k]``.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 <= beta_min <= beta_peak:
        raise ValueError("need 0 <= beta_min <= beta_peak")
    mid = (np.arange(1, T + 1) - 0.5) / T
    tri = 1.0 - np.abs(2.0 * mid - 1.0)
    beta = beta_min + (beta_peak - beta_min) * tri
    # force exact mirror symmetry regardless of rounding in `mid`
    beta = 0.5 * (beta + beta[::-1])
    return NoiseSchedule.from_beta(beta)


def marginal_coefficients(sched: NoiseSchedule, k: int):
    """``(w0, w1, var)`` with x_k ~ N(w0 x0 + w1 x1, var I)."""
    k = sched.check_step(k)
    s2, sb2 = sched.sigma2[k], sched.sigma2_bar[k]
    denom = s2 + sb2
    return sb2 / denom, s2 / denom, s2 * sb2 / denom


def sample_xt(x0, x1, k: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw the bridge state at grid index ``k``; exact endpoints at k = 0 and k = T."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    w0, w1, var = marginal_coefficients(sched, k)
    if var == 0.0:
        # no noise draw at the pinned ends, keeps the endpoint bit-exact
        return x0.copy() if w1 == 0.0 else x1.copy()
    return w0 * x0 + w1 * x1 + np.sqrt(var) * rng.standard_normal(x0.shape)


def sb_target(xt, x0, k: int, sched: NoiseSchedule) -> np.ndarray:
    k = sched.check_step(k)
    if k == 0:
        raise ValueError("target undefined at t = 0 (sigma = 0)")
    return (np.asarray(xt, dtype=np.float64) - np.asarray(x0, dtype=np.float64)) / np.sqrt(sched.sigma2[k])


def sample_train_step(sched: NoiseSchedule, rng: np.random.Generator, size=None):
    """Uniform grid index in {1, ..., T} (t = 0 excluded)."""
    return rng.integers(1, sched.T + 1, size=size)


def sb_loss(eps_fn, pair, sched: NoiseSchedule, rng: np.random.Generator):
    """Bridge regression loss for one ``(x0, x1)`` pair.

    ``eps_fn(xt, k, x1)`` returns the predicted target as an array or a
    :class:`~codec_resynth.nnet.Tensor`; the mean squared error keeps the
    graph, so ``loss.backward()`` reaches the model parameters.
    """
    from .nnet.autodiff import as_tensor

    x0, x1 = (np.asarray(a, dtype=np.float64) for a in pair)
    if x0.shape != x1.shape:
        raise ValueError(f"pair shapes differ: {x0.shape} vs {x1.shape}")
    k = int(sample_train_step(sched, rng))
    xt = sample_xt(x0, x1, k, sched, rng)
    target = sb_target(xt, x0, k, sched)
    diff = as_tensor(eps_fn(xt, k, x1)) - target
    return (diff * diff).mean()


def backward_steps(sched: NoiseSchedule, nfe: int) -> np.ndarray:
    """Grid indices T = k_nfe > ... > k_0 = 0, uniformly subsampled."""
    if not 1 <= nfe <= sched.T:
        raise ValueError(f"nfe must be in [1, {sched.T}], got {nfe}")
    ks = np.round(np.linspace(0, sched.T, nfe + 1)).astype(np.int64)
    return ks[::-1]


def ddpm_backward(eps_fn, x1, nfe: int, sched: NoiseSchedule, rng: np.random.Generator,
                  trajectory: list | None = None) -> np.ndarray:
    """Iterate from ``x1`` at t = 1 to an estimate of ``x0`` with ``nfe`` denoiser calls.

    Each step t -> s predicts ``x0_hat = x - sigma(t) eps`` and samples the
    bridge posterior between ``x0_hat`` and the current state::

        a2   = s2(t) - s2(s)
        x    ~ N( (a2 x0_hat + s2(s) x) / s2(t),  s2(s) a2 / s2(t) I )

    The last step lands on s = 0 with zero variance and returns ``x0_hat``.
    If ``trajectory`` is a list, ``(k, state)`` pairs are appended to it.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    ks = backward_steps(sched, nfe)
    x = x1.copy()
    if trajectory is not None:
        trajectory.append((int(ks[0]), x.copy()))
    for kt, ks_ in zip(ks[:-1], ks[1:]):
        s2t, s2s = sched.sigma2[kt], sched.sigma2[ks_]
        eps = np.asarray(eps_fn(x, int(kt), x1), dtype=np.float64)
        x0_hat = x - np.sqrt(s2t) * eps
        a2 = s2t - s2s
        if a2 <= 0.0:
            # zero diffusion over this step: nothing moves
            pass
        elif s2s == 0.0:
            x = x0_hat
        else:
            var = s2s * a2 / s2t
            x = (a2 / s2t) * x0_hat + (s2s / s2t) * x + np.sqrt(var) * rng.standard_normal(x.shape)
        if trajectory is not None:
            trajectory.append((int(ks_), x.copy()))
    return x


def oracle_eps(x0, sched: NoiseSchedule):
    """Exact target function for a known ``x0``; with it the sampler recovers ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)

    def eps_fn(x, k, x1):
        return (x - x0) / np.sqrt(sched.sigma2[k])

    return eps_fn
