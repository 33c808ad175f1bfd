"""Kernels, exact multi-output GP regression, confidence radius and information gain.

All outputs share one kernel, so a fitted posterior holds a single Cholesky
factor of ``K + sigma_w^2 I`` and one solve vector per output coordinate.
Kernels may carry a feature map that sends selected angle coordinates to
``(sin, cos)`` pairs before the distance is taken.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

KINDS = ("se", "linear", "matern52")

# Counts benign numerical events (clamped negative variances, jitter escalations).
NUMERICS_WARNINGS: Counter = Counter()


class NumericalError(ArithmeticError):
    """Raised when a Gram matrix cannot be factorized even after jitter escalation."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    lengthscales: tuple
    variance: float = 1.0
    angle_dims: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not ls or min(ls) <= 0:
            raise ValueError("lengthscales must be a nonempty vector of positive numbers")
        if not self.variance > 0:
            raise ValueError("signal variance must be positive")
        if any(d < 0 or d >= len(ls) for d in self.angle_dims):
            raise ValueError("angle_dims index out of range")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        object.__setattr__(self, "angle_dims", tuple(int(d) for d in self.angle_dims))

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)

    @property
    def stationary(self) -> bool:
        return self.kind != "linear"

    def features(self, Z: np.ndarray) -> np.ndarray:
        """Map raw inputs to scaled features; angle columns become (sin, cos) pairs."""
        Z = np.asarray(Z, dtype=float)
        if Z.shape[-1] != self.input_dim:
            raise ValueError(
                f"input has dimension {Z.shape[-1]}, kernel expects {self.input_dim}"
            )
        ls = np.asarray(self.lengthscales)
        if not self.angle_dims:
            return Z / ls
        cols = []
        for i in range(self.input_dim):
            if i in self.angle_dims:
                cols.append(np.sin(Z[..., i]) / ls[i])
                cols.append(np.cos(Z[..., i]) / ls[i])
            else:
                cols.append(Z[..., i] / ls[i])
        return np.stack(cols, axis=-1)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _from_features(spec: KernelSpec, FA: np.ndarray, FB: np.ndarray) -> np.ndarray:
    if spec.kind == "linear":
        return spec.variance * (FA @ FB.T)
    d2 = _sqdist(FA, FB)
    if spec.kind == "se":
        return spec.variance * np.exp(-0.5 * d2)
    r = np.sqrt(5.0 * d2)
    return spec.variance * (1.0 + r + r * r / 3.0) * np.exp(-r)


def kernel_matrix(spec: KernelSpec, A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    FA = spec.features(A)
    FB = FA if B is None else spec.features(np.atleast_2d(np.asarray(B, dtype=float)))
    K = _from_features(spec, FA, FB)
    if B is None:
        K = 0.5 * (K + K.T)
    return K


def kernel_diag(spec: KernelSpec, A: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != spec.input_dim:
        raise ValueError(f"input has dimension {A.shape[1]}, kernel expects {spec.input_dim}")
    if spec.stationary:
        return np.full(A.shape[0], spec.variance)
    F = spec.features(A)
    return spec.variance * (F * F).sum(1)


def kernel_eval(spec: KernelSpec, z, z2) -> float:
    z = np.asarray(z, dtype=float).ravel()
    z2 = np.asarray(z2, dtype=float).ravel()
    if z.shape != z2.shape:
        raise ValueError("kernel arguments have different dimensions")
    return float(kernel_matrix(spec, z[None], z2[None])[0, 0])


# ---------------------------------------------------------------- mean functions


class ZeroMean:
    kind = "zero"

    def __init__(self, d_x: int):
        self.d_x = int(d_x)

    def __call__(self, Z):
        Z = np.atleast_2d(Z)
        return np.zeros((Z.shape[0], self.d_x))


class AffineMean:
    """mu(z) = A z + b."""

    kind = "affine"

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, dtype=float)
        self.d_x = self.A.shape[0]

    def __call__(self, Z):
        return np.atleast_2d(Z) @ self.A.T + self.b


class TabulatedMean:
    """Piecewise-linear interpolation of mean values tabulated on a rectilinear grid.

    Queries outside the grid are clamped to its boundary.
    """

    kind = "tabulated"

    def __init__(self, axes: Sequence[np.ndarray], values: np.ndarray):
        from scipy.interpolate import RegularGridInterpolator

        self.axes = [np.asarray(a, dtype=float) for a in axes]
        values = np.asarray(values, dtype=float)
        self.d_x = values.shape[-1]
        self._interp = RegularGridInterpolator(self.axes, values, method="linear")

    def __call__(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float)).copy()
        for i, a in enumerate(self.axes):
            Z[:, i] = np.clip(Z[:, i], a[0], a[-1])
        return self._interp(Z)


@dataclass(frozen=True)
class PriorSpec:
    """Prior mean, RKHS bound and noise level.

    ``output_scale`` optionally expresses each output coordinate in its own unit:
    the GP models ``(f_j - mu_j) / scale_j`` with the shared kernel, so the
    posterior std of coordinate j is ``scale_j * sigma(z)``. Default is all ones.
    """

    mean: Callable
    B: float
    sigma_w: float
    output_scale: tuple | None = None

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError("RKHS bound B must be positive")
        if not self.sigma_w > 0:
            raise ValueError("noise std sigma_w must be positive")
        if self.output_scale is not None:
            sc = tuple(float(v) for v in self.output_scale)
            if len(sc) != self.d_x or min(sc) <= 0:
                raise ValueError("output_scale needs one positive entry per output")
            object.__setattr__(self, "output_scale", sc)

    @property
    def d_x(self) -> int:
        return self.mean.d_x

    @property
    def scale(self) -> np.ndarray:
        return np.ones(self.d_x) if self.output_scale is None else np.asarray(self.output_scale)

    @property
    def scale_norm(self) -> float:
        """Euclidean norm of the output scales (sqrt(d_x) by default)."""
        return float(np.sqrt((self.scale**2).sum()))


# ---------------------------------------------------------------- factorization


def robust_cholesky(K: np.ndarray, start_rel: float = 1e-10, max_rel: float = 1e-4):
    """Cholesky factor of ``K + jitter*I``.

    The first attempt uses no jitter; on failure the jitter starts at
    start_rel*trace/N and grows x10 up to max_rel*trace/N. Returns ``(L, jitter)``.
    """
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return linalg.cholesky(K, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    scale = max(float(np.trace(K)) / n, np.finfo(float).tiny)
    jitter = start_rel * scale
    while True:
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            NUMERICS_WARNINGS["jitter_escalation"] += 1
            return L, jitter
        except linalg.LinAlgError:
            if jitter * 10 > max_rel * scale * (1 + 1e-12):
                raise NumericalError(
                    f"Gram matrix not positive definite; failed with jitter {jitter:.3e}",
                    jitter,
                ) from None
            jitter *= 10.0


def _tri_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    if L.shape[0] == 0:
        return np.zeros((0,) + B.shape[1:])
    return linalg.solve_triangular(L, B, lower=True, check_finite=False)


# ---------------------------------------------------------------- posterior


@dataclass(frozen=True, eq=False)
class GpPosterior:
    prior: PriorSpec
    kernel: KernelSpec
    Z: np.ndarray
    Y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    white: np.ndarray = field(repr=False)
    jitter: float = 0.0
    n_episodes: int = 0
    d_a: int = 0

    @property
    def d_x(self) -> int:
        return self.prior.d_x

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def _check(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.kernel.input_dim:
            raise ValueError(
                f"query has dimension {Z.shape[1]}, expected {self.kernel.input_dim}"
            )
        return Z

    def predict(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean (Q, d_x) and shared std (Q,) in scaled output units."""
        Z = self._check(Z)
        mu0 = self.prior.mean(Z)
        kzz = kernel_diag(self.kernel, Z)
        if self.n == 0:
            return mu0, np.sqrt(kzz)
        Ks = kernel_matrix(self.kernel, Z, self.Z)
        V = _tri_solve(self.chol, Ks.T)
        mean = mu0 + (V.T @ self.white) * self.prior.scale
        var = kzz - (V * V).sum(0)
        return mean, _clamped_sqrt(var)

    def mean(self, Z) -> np.ndarray:
        Z = self._check(Z)
        mu0 = self.prior.mean(Z)
        if self.n == 0:
            return mu0
        return mu0 + (kernel_matrix(self.kernel, Z, self.Z) @ self.alpha) * self.prior.scale

    def std(self, Z) -> np.ndarray:
        """Per-coordinate posterior std, shape (Q, d_x); equal across coordinates up to output scale."""
        _, s = self.predict(Z)
        return s[:, None] * self.prior.scale

    def uncertainty(self, Z) -> np.ndarray:
        """Scalar uncertainty s_n(z): Euclidean norm of the std vector."""
        _, s = self.predict(Z)
        return s * self.prior.scale_norm

    def nested_predict(self, Z, sizes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Means and stds of the posteriors fitted on each data prefix ``Z[:size]``.

        The leading block of a lower Cholesky factor is the factor of the leading
        block of the matrix, so one triangular solve yields every prefix posterior.
        Returns arrays of shape (len(sizes), Q, d_x) and (len(sizes), Q).
        """
        Z = self._check(Z)
        mu0 = self.prior.mean(Z)
        kzz = kernel_diag(self.kernel, Z)
        L = len(sizes)
        means = np.empty((L,) + mu0.shape)
        stds = np.empty((L, Z.shape[0]))
        if self.n == 0 or max(sizes, default=0) == 0:
            means[:] = mu0
            stds[:] = np.sqrt(kzz)
            return means, stds
        nmax = max(sizes)
        Ks = kernel_matrix(self.kernel, Z, self.Z[:nmax])
        V = _tri_solve(self.chol[:nmax, :nmax], Ks.T)
        cum_var = np.cumsum(V * V, axis=0)
        for i, s in enumerate(sizes):
            if s == 0:
                means[i] = mu0
                stds[i] = np.sqrt(kzz)
                continue
            means[i] = mu0 + (V[:s].T @ self.white[:s]) * self.prior.scale
            stds[i] = _clamped_sqrt(kzz - cum_var[s - 1])
        return means, stds

    def is_prefix_of(self, other: "GpPosterior") -> bool:
        if other.kernel != self.kernel or other.prior is not self.prior:
            return False
        if self.n > other.n:
            return False
        return bool(
            np.array_equal(other.Z[: self.n], self.Z)
            and np.array_equal(other.Y[: self.n], self.Y)
        )


def _clamped_sqrt(var: np.ndarray) -> np.ndarray:
    neg = var < 0
    if neg.any():
        NUMERICS_WARNINGS["negative_variance"] += int(neg.sum())
        var = np.where(neg, 0.0, var)
    return np.sqrt(var)


def gp_fit(prior: PriorSpec, kernel: KernelSpec, Z, Y, *, n_episodes: int = 0, d_a: int = 0) -> GpPosterior:
    """Exact GP regression on (Z, Y); empty data gives the prior."""
    d_in = kernel.input_dim
    Z = np.asarray(Z, dtype=float).reshape(-1, d_in)
    Y = np.asarray(Y, dtype=float).reshape(-1, prior.d_x)
    if Z.shape[0] != Y.shape[0]:
        raise ValueError("inputs and targets have different numbers of rows")
    n = Z.shape[0]
    if n == 0:
        empty = np.zeros((0, prior.d_x))
        return GpPosterior(prior, kernel, Z, Y, np.zeros((0, 0)), empty, empty, 0.0, n_episodes, d_a)
    K = kernel_matrix(kernel, Z) + prior.sigma_w**2 * np.eye(n)
    L, jitter = robust_cholesky(K)
    resid = (Y - prior.mean(Z)) / prior.scale
    white = _tri_solve(L, resid)
    alpha = linalg.solve_triangular(L.T, white, lower=False, check_finite=False)
    for a in (Z, Y, L, alpha, white):
        a.setflags(write=False)
    return GpPosterior(prior, kernel, Z, Y, L, alpha, white, jitter, n_episodes, d_a)


def posterior_mean(gp: GpPosterior, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = gp.mean(z)
    return out[0] if z.ndim == 1 else out


def posterior_std(gp: GpPosterior, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = gp.std(z)
    return out[0] if z.ndim == 1 else out


def uncertainty_s(gp: GpPosterior, z):
    z = np.asarray(z, dtype=float)
    out = gp.uncertainty(z)
    return float(out[0]) if z.ndim == 1 else out


# ---------------------------------------------------------------- confidence radius


def beta(n_episodes: int, T: int, prior: PriorSpec | None = None, delta: float = 0.1,
         gamma: float = 0.0, d_x: int = 1, *, B: float | None = None,
         sigma_w: float | None = None) -> float:
    """Calibration radius B + sigma_w * sqrt(2 (gamma + 1 + ln(d_x / delta))).

    ``gamma`` stands in for the maximum information gain after ``n_episodes * T``
    observations; ``n_episodes`` and ``T`` are carried for bookkeeping only.
    B and sigma_w come from ``prior`` unless given explicitly (sigma_w may then be 0).
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if gamma < 0:
        raise ValueError("information gain must be nonnegative")
    B = prior.B if B is None else B
    sigma_w = prior.sigma_w if sigma_w is None else sigma_w
    return B + sigma_w * math.sqrt(2.0 * (gamma + 1.0 + math.log(d_x / delta)))


# ---------------------------------------------------------------- information gain


def info_gain(kernel: KernelSpec, points, sigma_w: float) -> float:
    """0.5 * log det(I + sigma_w^-2 K) via the Cholesky log-diagonal."""
    P = np.asarray(points, dtype=float).reshape(-1, kernel.input_dim)
    if P.shape[0] == 0:
        return 0.0
    K = kernel_matrix(kernel, P) / sigma_w**2
    K[np.diag_indices_from(K)] += 1.0
    try:
        L = linalg.cholesky(K, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise NumericalError("info_gain factorization failed", 0.0) from err
    return float(np.log(np.diag(L)).sum())


def max_info_gain_greedy(kernel: KernelSpec, candidates, N: int, sigma_w: float) -> float:
    """Greedy surrogate for the maximum information gain over size-N subsets.

    Each step adds the candidate with the largest current posterior variance,
    which is the largest marginal gain 0.5*log(1 + var/sigma_w^2).
    """
    C = np.asarray(candidates, dtype=float).reshape(-1, kernel.input_dim)
    if N <= 0:
        raise ValueError("N must be positive")
    if C.shape[0] == 0:
        raise ValueError("candidate set is empty")
    N = min(N, C.shape[0])
    K = kernel_matrix(kernel, C)
    var = np.diag(K).copy()
    chosen: list[int] = []
    total = 0.0
    # rows of the incremental Cholesky of the noisy Gram of the chosen set, projected on all candidates
    proj = np.zeros((0, C.shape[0]))
    for _ in range(N):
        mask = np.ones(C.shape[0], dtype=bool)
        mask[chosen] = False
        idx = int(np.flatnonzero(mask)[np.argmax(var[mask])])
        total += 0.5 * math.log1p(max(var[idx], 0.0) / sigma_w**2)
        denom = math.sqrt(max(var[idx], 0.0) + sigma_w**2)
        row = (K[idx] - proj[:, idx] @ proj) / denom
        proj = np.vstack([proj, row])
        var = var - row * row
        chosen.append(idx)
    return total


def max_info_gain_exhaustive(kernel: KernelSpec, candidates, N: int, sigma_w: float) -> float:
    C = np.asarray(candidates, dtype=float).reshape(-1, kernel.input_dim)
    return max(info_gain(kernel, C[list(s)], sigma_w) for s in itertools.combinations(range(len(C)), N))
