"""Deterministic GP function draws, confidence-band truncation and scalar schedules.

Two realization mechanisms are available:

``pathwise``
    Exact lazy sampling. Every new query is drawn from the GP conditioned on the
    sample's own earlier values (treated as noise-free observations) and, for
    posterior draws, on the training data. Values are cached so repeated queries
    return identical vectors.
``rff``
    A global approximate draw from random Fourier features (exact finite features
    for the linear kernel). Posterior draws add the exact pathwise data update,
    ``f_post = f_prior + k(., X) (K + s^2 I)^-1 (y - f_prior(X) - eps)``.

Truncation layers store a posterior reference and a radius; clipping happens at
evaluation time, layer by layer, in insertion order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .kernel_gp import (
    GpPosterior,
    KernelSpec,
    PriorSpec,
    gp_fit,
    kernel_diag,
    kernel_matrix,
    robust_cholesky,
)


class ConservatismWarning(UserWarning):
    """The sample budget was capped below the value the bound asks for."""


# ---------------------------------------------------------------- feature draws


class _FourierPrior:
    """Zero-mean approximate GP draw with ``d_x`` independent output columns."""

    def __init__(self, kernel: KernelSpec, d_x: int, n_features: int, rng: np.random.Generator):
        self.kernel = kernel
        n_in = kernel.features(np.zeros((1, kernel.input_dim))).shape[1]
        if kernel.kind == "linear":
            self.omega = None
            self.weights = rng.standard_normal((n_in, d_x))
            return
        omega = rng.standard_normal((n_features, n_in))
        if kernel.kind == "matern52":
            nu = 2.5
            omega /= np.sqrt(rng.chisquare(2 * nu, size=(n_features, 1)) / (2 * nu))
        self.omega = omega
        self.phase = rng.uniform(0.0, 2 * math.pi, n_features)
        self.weights = rng.standard_normal((n_features, d_x))
        self.scale = math.sqrt(2.0 * kernel.variance / n_features)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        F = self.kernel.features(Z)
        if self.omega is None:
            return math.sqrt(self.kernel.variance) * (F @ self.weights)
        return self.scale * (np.cos(F @ self.omega.T + self.phase) @ self.weights)


# ---------------------------------------------------------------- dynamics sample


@dataclass(eq=False)
class DynamicsSample:
    """One deterministic dynamics function drawn from a GP, plus its truncation layers."""

    prior: PriorSpec
    kernel: KernelSpec
    seed: int
    sample_id: int = 0
    mode: str = "pathwise"
    n_features: int = 256
    posterior: GpPosterior | None = None
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("pathwise", "rff"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        self.d_x = self.prior.d_x
        self._rng = np.random.default_rng(self.seed)
        if self.mode == "rff":
            self._fourier = _FourierPrior(self.kernel, self.d_x, self.n_features, self._rng)
            self._update = None
            if self.posterior is not None and self.posterior.n > 0:
                gp = self.posterior
                eps = self.prior.sigma_w * self._rng.standard_normal(gp.Y.shape)
                resid = (gp.Y - self._prior_draw(gp.Z)) / self.prior.scale - eps
                self._update = linalg.cho_solve((gp.chol, True), resid, check_finite=False)
            return
        # pathwise state: joint Cholesky over [training data, cached points]
        self._keys: dict[bytes, int] = {}
        self.cache_z = np.zeros((0, self.kernel.input_dim))
        self.cache_raw = np.zeros((0, self.d_x))
        self.cache_val = np.zeros((0, self.d_x))
        gp = self.posterior
        if gp is not None and gp.n > 0:
            self._cond_z = np.array(gp.Z)
            self._chol = np.array(gp.chol)
            self._white = np.array(gp.white)
        else:
            self._cond_z = np.zeros((0, self.kernel.input_dim))
            self._chol = np.zeros((0, 0))
            self._white = np.zeros((0, self.d_x))

    # -- raw (untruncated) realization

    def _prior_draw(self, Z):
        return self.prior.mean(Z) + self._fourier(Z) * self.prior.scale

    def raw(self, Z) -> np.ndarray:
        """Untruncated realization at the rows of Z (may extend the pathwise cache)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.mode == "rff":
            out = self._prior_draw(Z)
            if self._update is not None:
                out = out + (kernel_matrix(self.kernel, Z, self.posterior.Z) @ self._update) * self.prior.scale
            return out
        idx = self._ensure_cached(Z)
        return self.cache_raw[idx]

    def _ensure_cached(self, Z: np.ndarray) -> np.ndarray:
        keys = [z.tobytes() for z in Z]
        new_rows = []
        seen = {}
        for i, k in enumerate(keys):
            if k not in self._keys and k not in seen:
                seen[k] = len(new_rows)
                new_rows.append(i)
        if new_rows:
            self._draw_new(Z[new_rows], [keys[i] for i in new_rows])
        return np.array([self._keys[k] for k in keys], dtype=int)

    def _draw_new(self, Zb: np.ndarray, keys: list) -> None:
        mu_b = self.prior.mean(Zb)
        Kbb = kernel_matrix(self.kernel, Zb)
        if self._cond_z.shape[0]:
            Kob = kernel_matrix(self.kernel, self._cond_z, Zb)
            Lob = linalg.solve_triangular(self._chol, Kob, lower=True, check_finite=False)
            cond_mean = Lob.T @ self._white
            S = Kbb - Lob.T @ Lob
        else:
            Lob = np.zeros((0, Zb.shape[0]))
            cond_mean = 0.0
            S = Kbb
        S = 0.5 * (S + S.T)
        # conditional covariance may be numerically rank deficient; scale jitter by the prior diagonal
        Lbb, _ = robust_cholesky(S + 1e-12 * np.mean(kernel_diag(self.kernel, Zb)) * np.eye(len(Zb)))
        xi = self._rng.standard_normal((Zb.shape[0], self.d_x))
        vals = mu_b + (cond_mean + Lbb @ xi) * self.prior.scale
        n_old = self._chol.shape[0]
        nb = Zb.shape[0]
        chol = np.zeros((n_old + nb, n_old + nb))
        chol[:n_old, :n_old] = self._chol
        chol[n_old:, :n_old] = Lob.T
        chol[n_old:, n_old:] = Lbb
        self._chol = chol
        self._white = np.vstack([self._white, xi])
        self._cond_z = np.vstack([self._cond_z, Zb])
        start = self.cache_z.shape[0]
        self.cache_z = np.vstack([self.cache_z, Zb])
        self.cache_raw = np.vstack([self.cache_raw, vals])
        self.cache_val = np.vstack([self.cache_val, self._clip(Zb, vals)])
        for j, k in enumerate(keys):
            self._keys[k] = start + j

    # -- truncation

    def _clip(self, Z, vals, layers=None):
        return clip_through_layers(self.layers if layers is None else layers, Z, vals)

    def __call__(self, Z) -> np.ndarray:
        """Truncated realization at the rows of Z, shape (Q, d_x)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.mode == "rff":
            return self._clip(Z, self.raw(Z))
        idx = self._ensure_cached(Z)
        return self.cache_val[idx]

    def truncate(self, gp: GpPosterior, beta: float) -> "DynamicsSample":
        """Append a truncation layer and re-clip cached values in place."""
        if beta < 0:
            raise ValueError("truncation radius must be nonnegative")
        self.layers.append((gp, float(beta)))
        if self.mode == "pathwise" and self.cache_z.shape[0]:
            self.cache_val = clip_through_layers([(gp, float(beta))], self.cache_z, self.cache_val)
        return self


def clip_through_layers(layers: Sequence, Z: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Clip values into each layer's band [mu - beta*sigma, mu + beta*sigma], in order."""
    if not layers:
        return vals
    means, stds = layer_bands(layers, Z)
    scale = layers[0][0].prior.scale
    out = vals
    for (_, b), m, s in zip(layers, means, stds):
        half = b * s[:, None] * scale
        out = np.clip(out, m - half, m + half)
    return out


def layer_bands(layers: Sequence, Z: np.ndarray):
    """Means (L, Q, d_x) and stds (L, Q) of every layer posterior at Z."""
    gps = [gp for gp, _ in layers]
    last = max(gps, key=lambda g: g.n)
    if all(g is last or g.is_prefix_of(last) for g in gps):
        return last.nested_predict(Z, [g.n for g in gps])
    preds = [g.predict(Z) for g in gps]
    return np.stack([p[0] for p in preds]), np.stack([p[1] for p in preds])


def evaluate_samples(samples: Sequence, Zs: Sequence[np.ndarray]) -> list:
    """Evaluate many samples at once; RFF samples sharing one layer stack share the band solve."""
    out: list = [None] * len(samples)
    groups: dict = {}
    for i, s in enumerate(samples):
        if isinstance(s, DynamicsSample) and s.mode == "rff" and s.layers:
            groups.setdefault(id(s.layers[0][0]), []).append(i)
        else:
            out[i] = s(Zs[i])
    for idx in groups.values():
        ref = samples[idx[0]].layers
        shared = [i for i in idx if _same_layers(samples[i].layers, ref)]
        for i in idx:
            if i not in shared:
                out[i] = samples[i](Zs[i])
        if not shared:
            continue
        Zcat = np.concatenate([np.atleast_2d(Zs[i]) for i in shared])
        raw = np.concatenate([samples[i].raw(Zs[i]) for i in shared])
        clipped = clip_through_layers(ref, Zcat, raw)
        start = 0
        for i in shared:
            n = np.atleast_2d(Zs[i]).shape[0]
            out[i] = clipped[start:start + n]
            start += n
    return out


def _same_layers(a, b) -> bool:
    return len(a) == len(b) and all(x[0] is y[0] and x[1] == y[1] for x, y in zip(a, b))


def draw_prior_sample(prior: PriorSpec, kernel: KernelSpec, seed: int, *, mode: str = "pathwise",
                      n_features: int = 256, sample_id: int = 0) -> DynamicsSample:
    return DynamicsSample(prior, kernel, seed, sample_id=sample_id, mode=mode, n_features=n_features)


def draw_posterior_sample(gp: GpPosterior, seed: int, *, mode: str = "pathwise",
                          n_features: int = 256, sample_id: int = 0) -> DynamicsSample:
    return DynamicsSample(gp.prior, gp.kernel, seed, sample_id=sample_id, mode=mode,
                          n_features=n_features, posterior=gp)


def eval_sample(sample: DynamicsSample, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = sample(z)
    return out[0] if z.ndim == 1 else out


def truncate_sample(sample: DynamicsSample, gp: GpPosterior, beta: float) -> DynamicsSample:
    return sample.truncate(gp, beta)


def prior_layer(prior: PriorSpec, kernel: KernelSpec) -> GpPosterior:
    """Data-free posterior whose band is mu +/- beta*sqrt(k(z,z))."""
    return gp_fit(prior, kernel, np.zeros((0, kernel.input_dim)), np.zeros((0, prior.d_x)))


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class BudgetInputs:
    delta: float
    zeta: float
    B: float
    d_x: int
    phi: float

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not (self.zeta > 0 and self.B > 0 and self.d_x > 0 and self.phi >= 0):
            raise ValueError("zeta, B and d_x must be positive and phi nonnegative")


def sample_budget(inp: BudgetInputs, cap: int = 10**6) -> int:
    """Smallest M with M >= log(delta) / log(1 - exp(-d_x (B^2/2 + phi)))."""
    x = inp.d_x * (0.5 * inp.B**2 + inp.phi)
    if inp.delta == 1.0:
        return 1
    if x > 700.0:
        warnings.warn(f"sample budget exponent {x:.1f} overflows; returning cap {cap}",
                      ConservatismWarning, stacklevel=2)
        return cap
    # log(1 - e^-x), accurate at both ends
    denom = math.log(-math.expm1(-x)) if x < math.log(2) else math.log1p(-math.exp(-x))
    ratio = math.log(inp.delta) / denom
    # absorb last-bit rounding so exact integer ratios are not bumped up
    M = max(1, math.ceil(ratio - 8 * math.ulp(ratio)))
    if M > cap:
        warnings.warn(f"sample budget {M} exceeds cap; returning {cap}", ConservatismWarning,
                      stacklevel=2)
        return cap
    return M


@dataclass(frozen=True)
class SmallBallConfig:
    n_draws: int = 4000
    n_grid: int = 64
    lower: tuple = (0.0,)
    upper: tuple = (1.0,)
    seed: int = 0

    def grid(self, input_dim: int) -> np.ndarray:
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (input_dim,))
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (input_dim,))
        if input_dim == 1:
            return np.linspace(lo[0], hi[0], self.n_grid)[:, None]
        rng = np.random.default_rng(self.seed + 7919)
        return lo + (hi - lo) * rng.uniform(size=(self.n_grid, input_dim))


def small_ball_draws(kernel: KernelSpec, cfg: SmallBallConfig) -> np.ndarray:
    """Zero-mean prior draws on the fixed grid, shape (n_draws, n_grid)."""
    G = cfg.grid(kernel.input_dim)
    L, _ = robust_cholesky(kernel_matrix(kernel, G))
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((cfg.n_draws, G.shape[0])) @ L.T


def small_ball_exponent(kernel: KernelSpec, zeta: float, cfg: SmallBallConfig | None = None,
                        draws: np.ndarray | None = None) -> float:
    """Monte-Carlo small-ball exponent with add-one smoothing on a grid sup-norm.

    The grid sup-norm never exceeds the true sup-norm, so this estimates the
    exponent of a larger event than the one in the definition.
    """
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    cfg = cfg or SmallBallConfig()
    if draws is None:
        draws = small_ball_draws(kernel, cfg)
    hits = int((np.abs(draws).max(axis=1) < zeta).sum())
    return -math.log((hits + 1) / (draws.shape[0] + 1))


def tightening_delta(zeta: float, d_x: int, T: int, C_max: float, sigma_w: float) -> float:
    if sigma_w <= 0:
        raise ValueError("sigma_w must be positive")
    return zeta * math.sqrt(d_x) * T**2 * C_max / sigma_w


def exploration_threshold(eps: float, sigma_w: float, G_max: float, T: int, beta_n: float) -> float:
    if G_max <= 0 or T <= 0 or beta_n <= 0:
        raise ValueError("G_max, T and beta_n must be positive")
    return eps * sigma_w / (2.0 * G_max * T * beta_n)
