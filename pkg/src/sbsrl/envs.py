"""Ground-truth constrained control tasks with additive Gaussian process noise.

Angles are measured from upright, so ``theta = pi`` is the hanging rest state.
Rewards are the raw negative quadratics rescaled into ``[0, R_max]`` with bounds
taken over the state/action box; costs are clipped into ``[0, C_max]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .kernel_gp import AffineMean, KernelSpec, kernel_matrix

KINDS = ("pendulum", "cartpole", "synthetic-rkhs")

_DEFAULTS = {
    "pendulum": dict(
        d_x=2, d_a=1, horizon=100, budget=6.0,
        params={"mass": 1.0, "length": 1.0, "gravity": 9.81, "dt": 0.05},
        action_low=(-2.0,), action_high=(2.0,),
        rho0_mean=(math.pi, 0.0), rho0_std=(0.01, 0.01),
        state_high=(math.pi, 8.0), angle_dims=(0,),
    ),
    "cartpole": dict(
        d_x=4, d_a=1, horizon=200, budget=1.5,
        params={"cart_mass": 1.0, "pole_mass": 0.1, "length": 0.5, "gravity": 9.81, "dt": 0.05},
        action_low=(-10.0,), action_high=(10.0,),
        rho0_mean=(0.0, 0.0, math.pi, 0.0), rho0_std=(0.01, 0.01, 0.01, 0.01),
        state_high=(3.0, 10.0, math.pi, 15.0), angle_dims=(2,),
    ),
    "synthetic-rkhs": dict(
        d_x=1, d_a=1, horizon=20, budget=10.0, params={},
        action_low=(-1.0,), action_high=(1.0,),
        rho0_mean=(0.0,), rho0_std=(0.1,), state_high=(2.0,), angle_dims=(),
    ),
}


class DomainError(ArithmeticError):
    """Raised when a state or intermediate quantity becomes non-finite."""


@dataclass(frozen=True)
class KernelExpansion:
    """f(z) = mean(z) + sum_i k(z, c_i) alpha_i, the ground truth of the synthetic task."""

    kernel: KernelSpec
    centers: np.ndarray
    alpha: np.ndarray
    mean: Callable | None = None

    def __call__(self, Z):
        Z = np.atleast_2d(Z)
        out = kernel_matrix(self.kernel, Z, self.centers) @ self.alpha
        if self.mean is not None:
            out = out + self.mean(Z)
        return out

    def rkhs_norms(self) -> np.ndarray:
        K = kernel_matrix(self.kernel, self.centers)
        return np.sqrt(np.maximum(np.einsum("ij,ik,kj->j", self.alpha, K, self.alpha), 0.0))


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    d_x: int
    d_a: int
    horizon: int
    sigma_w: float
    budget: float
    params: dict
    action_low: tuple
    action_high: tuple
    rho0_mean: tuple
    rho0_std: tuple
    state_high: tuple
    angle_dims: tuple = ()
    theta_target: float = 0.0
    R_max: float = 1.0
    expansion: KernelExpansion | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon T must be at least 1")
        if self.sigma_w < 0:
            raise ValueError("noise std must be nonnegative")
        if self.kind == "synthetic-rkhs" and self.expansion is None:
            raise ValueError("synthetic-rkhs environment needs a kernel expansion")

    @property
    def dt(self) -> float:
        return self.params.get("dt", 1.0)

    @property
    def C_max(self) -> float:
        return float(self.state_high[_cost_index(self)] if self.kind != "synthetic-rkhs"
                     else self.state_high[0])

    @property
    def G_max(self) -> float:
        return max(self.C_max, self.R_max)

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=float)

    @property
    def input_dim(self) -> int:
        return self.d_x + self.d_a


def make_env(kind: str, **overrides) -> EnvSpec:
    base = dict(_DEFAULTS[kind])
    base["params"] = dict(base["params"])
    params = overrides.pop("params", None) or {}
    base["params"].update(params)
    for key in ("mass", "length", "gravity", "dt", "cart_mass", "pole_mass"):
        if key in overrides:
            base["params"][key] = overrides.pop(key)
    base.update(overrides)
    base.setdefault("sigma_w", 0.01)
    for key in ("action_low", "action_high", "rho0_mean", "rho0_std", "state_high", "angle_dims"):
        base[key] = tuple(np.atleast_1d(base[key]).tolist())
    return EnvSpec(kind=kind, **base)


def synthetic_env(kernel: KernelSpec, rkhs_norm: float, rng: np.random.Generator, *,
                  d_x: int = 1, n_centers: int = 20, sigma_w: float = 0.05,
                  horizon: int = 20, center_box: float = 1.5, mean: Callable | None = None,
                  **overrides) -> EnvSpec:
    """Synthetic task whose dynamics are a random kernel expansion of given RKHS norm per output."""
    d_in = kernel.input_dim
    d_a = d_in - d_x
    centers = rng.uniform(-center_box, center_box, size=(n_centers, d_in))
    alpha = rng.standard_normal((n_centers, d_x))
    exp = KernelExpansion(kernel, centers, alpha, mean)
    alpha = alpha * (rkhs_norm / exp.rkhs_norms())
    exp = KernelExpansion(kernel, centers, alpha, mean)
    defaults = dict(
        d_x=d_x, d_a=d_a, horizon=horizon, sigma_w=sigma_w,
        action_low=(-1.0,) * d_a, action_high=(1.0,) * d_a,
        rho0_mean=(0.0,) * d_x, rho0_std=(0.1,) * d_x, state_high=(2.0,) * d_x,
    )
    defaults.update(overrides)
    return make_env("synthetic-rkhs", expansion=exp, **defaults)


def _cost_index(spec: EnvSpec) -> int:
    return {"pendulum": 1, "cartpole": 0}[spec.kind]


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------- dynamics


def _pendulum_step(p: dict, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    th, om = X[:, 0], X[:, 1]
    u = U[:, 0]
    dt, g, l, m = p["dt"], p["gravity"], p["length"], p["mass"]
    om_next = om + dt * (g / l * np.sin(th) + u / (m * l * l))
    return np.stack([th + dt * om_next, om_next], axis=1)


def _cartpole_step(p: dict, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    pos, vel, th, om = X.T
    force = U[:, 0]
    dt, g, l = p["dt"], p["gravity"], p["length"]
    mc, mp = p["cart_mass"], p["pole_mass"]
    total = mc + mp
    sin, cos = np.sin(th), np.cos(th)
    temp = (force + mp * l * om * om * sin) / total
    th_acc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos * cos / total))
    x_acc = temp - mp * l * th_acc * cos / total
    vel_next = vel + dt * x_acc
    om_next = om + dt * th_acc
    return np.stack([pos + dt * vel_next, vel_next, th + dt * om_next, om_next], axis=1)


def true_dynamics(spec: EnvSpec, Z) -> np.ndarray:
    """Noise-free next state f*(z) for each row z = (x, a)."""
    Z = np.asarray(Z, dtype=float)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != spec.input_dim:
        raise ValueError(f"query has dimension {Z.shape[1]}, expected {spec.input_dim}")
    if not np.isfinite(Z).all():
        raise DomainError("non-finite state-action input")
    X, U = Z[:, : spec.d_x], Z[:, spec.d_x:]
    if spec.kind == "pendulum":
        out = _pendulum_step(spec.params, X, U)
    elif spec.kind == "cartpole":
        out = _cartpole_step(spec.params, X, U)
    else:
        out = spec.expansion(Z)
    return out[0] if single else out


# ---------------------------------------------------------------- reward and cost


def raw_reward(spec: EnvSpec, X, U) -> np.ndarray:
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    if spec.kind == "pendulum":
        dth = wrap_angle(X[:, 0] - spec.theta_target)
        return -(dth**2 + 0.1 * X[:, 1] ** 2 + 0.02 * U[:, 0] ** 2)
    if spec.kind == "cartpole":
        dth = wrap_angle(X[:, 2] - spec.theta_target)
        return -(dth**2 + X[:, 0] ** 2 + 0.1 * (X[:, 1] ** 2 + X[:, 3] ** 2)) - 0.01 * U[:, 0] ** 2
    return -(X * X).sum(1)


def _reward_floor(spec: EnvSpec) -> float:
    hi = np.asarray(spec.state_high, dtype=float)
    u = np.maximum(np.abs(spec.low), np.abs(spec.high))
    return float(raw_reward(spec, hi[None], u[None])[0])


def reward(spec: EnvSpec, X, U) -> np.ndarray:
    """Raw reward mapped affinely from [floor over the box, 0] onto [0, R_max]."""
    lo = _reward_floor(spec)
    r = (raw_reward(spec, X, U) - lo) / (0.0 - lo) * spec.R_max
    return np.clip(r, 0.0, spec.R_max)


def cost(spec: EnvSpec, X, U=None) -> np.ndarray:
    X = np.atleast_2d(X)
    if spec.kind == "synthetic-rkhs":
        c = np.sqrt((X * X).sum(1))
    else:
        c = np.abs(X[:, _cost_index(spec)])
    return np.minimum(c, spec.C_max)


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    cost: float


def env_reset(spec: EnvSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    mean = np.asarray(spec.rho0_mean, dtype=float)
    std = np.asarray(spec.rho0_std, dtype=float)
    shape = (spec.d_x,) if n is None else (n, spec.d_x)
    return mean + std * rng.standard_normal(shape)


def clip_action(spec: EnvSpec, a) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=float), spec.low, spec.high)


def env_step(spec: EnvSpec, state, action, rng: np.random.Generator) -> Transition:
    x = np.asarray(state, dtype=float)
    a = clip_action(spec, action)
    z = np.concatenate([x, a])
    nxt = true_dynamics(spec, z) + spec.sigma_w * rng.standard_normal(spec.d_x)
    if not np.isfinite(nxt).all():
        raise DomainError("non-finite next state")
    return Transition(x, a, nxt, float(reward(spec, x, a)[0]), float(cost(spec, x, a)[0]))


def _policy_action(policy, X, t):
    if callable(policy):
        return np.atleast_2d(policy(X, t))
    plan = np.asarray(policy, dtype=float)
    return np.broadcast_to(plan[t], (X.shape[0], plan.shape[1]))


@dataclass(frozen=True)
class PolicyEvaluation:
    j_r: float
    j_c: float
    se_r: float
    se_c: float
    max_cost: np.ndarray
    returns_r: np.ndarray = field(repr=False)
    returns_c: np.ndarray = field(repr=False)


def rollout_true(spec: EnvSpec, policy, n_rollouts: int, rng: np.random.Generator, *,
                 reward_fn=None, cost_fn=None, x0=None):
    """Vectorized episodes on the true system.

    Returns states (n, T+1, d_x), actions (n, T, d_a), rewards and costs (n, T).
    """
    reward_fn = reward_fn or (lambda X, U: reward(spec, X, U))
    cost_fn = cost_fn or (lambda X, U: cost(spec, X, U))
    T = spec.horizon
    X = env_reset(spec, rng, n_rollouts) if x0 is None else np.tile(np.asarray(x0, float), (n_rollouts, 1))
    states = np.empty((n_rollouts, T + 1, spec.d_x))
    actions = np.empty((n_rollouts, T, spec.d_a))
    rs = np.empty((n_rollouts, T))
    cs = np.empty((n_rollouts, T))
    states[:, 0] = X
    for t in range(T):
        U = clip_action(spec, _policy_action(policy, X, t))
        rs[:, t] = reward_fn(X, U)
        cs[:, t] = cost_fn(X, U)
        X = true_dynamics(spec, np.concatenate([X, U], axis=1))
        X = X + spec.sigma_w * rng.standard_normal(X.shape)
        if not np.isfinite(X).all():
            raise DomainError("non-finite state during rollout")
        actions[:, t] = U
        states[:, t + 1] = X
    return states, actions, rs, cs


def evaluate_policy_true(spec: EnvSpec, policy, n_rollouts: int, rng: np.random.Generator, *,
                         reward_fn=None, cost_fn=None) -> PolicyEvaluation:
    """Monte-Carlo reward and cost returns of a policy (open-loop plan or callable) under f*."""
    _, _, rs, cs = rollout_true(spec, policy, n_rollouts, rng, reward_fn=reward_fn, cost_fn=cost_fn)
    Rr, Rc = rs.sum(1), cs.sum(1)
    n = max(n_rollouts, 1)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return PolicyEvaluation(float(Rr.mean()), float(Rc.mean()), se(Rr), se(Rc), cs.max(1), Rr, Rc)


class TrueModel:
    """Exposes f* through the (mean, std) prediction interface used by the planner."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.d_x = spec.d_x

    def predict(self, Z):
        Z = np.atleast_2d(Z)
        return true_dynamics(self.spec, Z), np.zeros(Z.shape[0])

    def __call__(self, Z):
        return true_dynamics(self.spec, np.atleast_2d(Z))


# ---------------------------------------------------------------- prior knowledge


def linearized_prior_mean(spec: EnvSpec, param_scale: dict | None = None,
                          x_eq=None, a_eq=None, h: float = 1e-6) -> AffineMean:
    """Affine mean from a finite-difference linearization of a (mis-specified) model.

    ``param_scale`` multiplies physical parameters, e.g. ``{"mass": 1.1}``, to
    model a nominal simulator that differs from the true system.
    """
    params = dict(spec.params)
    for k, s in (param_scale or {}).items():
        params[k] = params[k] * s
    nominal = replace(spec, params=params)
    x_eq = np.asarray(spec.rho0_mean if x_eq is None else x_eq, dtype=float)
    a_eq = np.zeros(spec.d_a) if a_eq is None else np.asarray(a_eq, dtype=float)
    z0 = np.concatenate([x_eq, a_eq])
    f0 = true_dynamics(nominal, z0)
    E = np.eye(len(z0)) * h
    J = (true_dynamics(nominal, z0 + E) - true_dynamics(nominal, z0 - E)).T / (2 * h)
    return AffineMean(J, f0 - J @ z0)


def identity_prior_mean(spec: EnvSpec) -> AffineMean:
    A = np.zeros((spec.d_x, spec.input_dim))
    A[:, : spec.d_x] = np.eye(spec.d_x)
    return AffineMean(A)


def pd_plan(spec: EnvSpec, gains, model: Callable, x_ref=None) -> np.ndarray:
    """Open-loop plan from rolling a PD law a = -K (x - x_ref) through ``model`` from the rho0 mean."""
    K = np.atleast_2d(np.asarray(gains, dtype=float))
    x = np.asarray(spec.rho0_mean, dtype=float)
    x_ref = x.copy() if x_ref is None else np.asarray(x_ref, dtype=float)
    plan = np.empty((spec.horizon, spec.d_a))
    for t in range(spec.horizon):
        err = x - x_ref
        err[list(spec.angle_dims)] = wrap_angle(err[list(spec.angle_dims)])
        a = clip_action(spec, -K @ err)
        plan[t] = a
        x = np.asarray(model(np.concatenate([x, a])[None]))[0]
    return plan


def offline_dataset(spec: EnvSpec, gains, n_episodes: int, rng: np.random.Generator,
                    excitation: float = 0.1):
    """Transitions from a noisy PD controller on the true system (warm-start data)."""
    K = np.atleast_2d(np.asarray(gains, dtype=float))
    x_ref = np.asarray(spec.rho0_mean, dtype=float)
    span = (spec.high - spec.low) / 2

    def policy(X, t):
        err = X - x_ref
        if spec.angle_dims:
            err[:, list(spec.angle_dims)] = wrap_angle(err[:, list(spec.angle_dims)])
        return -err @ K.T + excitation * span * rng.standard_normal((X.shape[0], spec.d_a))

    states, actions, _, _ = rollout_true(spec, policy, n_episodes, rng)
    Z = np.concatenate([states[:, :-1], actions], axis=2).reshape(-1, spec.input_dim)
    Y = states[:, 1:].reshape(-1, spec.d_x)
    return Z, Y


def jacobian_bound(spec: EnvSpec, Z, h: float = 1e-5) -> float:
    """Largest finite-difference Jacobian spectral norm of f* over the rows of Z."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    best = 0.0
    for z in Z:
        E = np.eye(len(z)) * h
        J = (true_dynamics(spec, z + E) - true_dynamics(spec, z - E)).T / (2 * h)
        best = max(best, float(np.linalg.norm(J, 2)))
    return best
