"""Monte-Carlo return estimation over sampled dynamics and an iCEM action-sequence optimizer.

Plans are open-loop action sequences of shape (T, d_a). Everything is batched
over candidate plans: a batch of P plans is rolled out jointly, one model query
per time step for all plans and Monte-Carlo particles. Candidates share common
random numbers (initial states and process noise) through an ``McContext`` so
that the planning objective is deterministic within one optimization call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envs import EnvSpec, cost, env_reset, reward
from .sampler import evaluate_samples

SCHEMES = ("per-sample", "ts1")
UNCERTAINTY = ("epistemic", "combined")


@dataclass(frozen=True)
class McConfig:
    n_mean: int = 5
    n_cost: int = 3
    scheme: str = "per-sample"
    uncertainty: str = "epistemic"

    def __post_init__(self):
        if self.n_mean < 1 or self.n_cost < 1:
            raise ValueError("Monte-Carlo rollout counts must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown rollout scheme {self.scheme!r}")
        if self.uncertainty not in UNCERTAINTY:
            raise ValueError(f"unknown uncertainty measure {self.uncertainty!r}")


@dataclass(frozen=True)
class IcemParams:
    population: int = 256
    elite_frac: float = 0.1
    iterations: int = 10
    init_std: float = 1.0
    noise_beta: float = 2.0
    shift_elites: bool = True
    keep_frac: float = 0.3
    momentum: float = 0.1
    pop_decay: float = 1.0
    min_std: float = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0 < self.elite_frac <= 1:
            raise ValueError("elite fraction must lie in (0, 1]")
        if self.population < self.n_elites or self.n_elites < 1:
            raise ValueError("population must be at least the number of elites, which must be >= 1")
        if not 0 <= self.keep_frac <= 1 or not 0 <= self.momentum < 1:
            raise ValueError("keep fraction must lie in [0, 1] and momentum in [0, 1)")
        if self.pop_decay < 1:
            raise ValueError("population decay factor must be >= 1")

    @property
    def n_elites(self) -> int:
        return max(1, int(round(self.population * self.elite_frac)))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    valid: bool = True

    @property
    def j_r(self) -> float:
        return float(self.rewards.sum()) if self.valid else -math.inf

    @property
    def j_c(self) -> float:
        return float(self.costs.sum()) if self.valid else math.inf


@dataclass(frozen=True)
class ReturnEstimates:
    """Returns for a batch of P plans. ``j_c`` has one column per dynamics sample."""

    j_r: np.ndarray
    j_c: np.ndarray
    j_s: np.ndarray
    n_mc: int
    valid: np.ndarray
    j_c_mean: np.ndarray = field(default=None, repr=False)

    def __getitem__(self, i) -> "ReturnEstimates":
        return ReturnEstimates(self.j_r[i], self.j_c[i], self.j_s[i], self.n_mc, self.valid[i],
                               None if self.j_c_mean is None else self.j_c_mean[i])


# ---------------------------------------------------------------- rollouts


def rollout_model(model_eval: Callable, plan, x0, T: int, sigma_w: float, rng: np.random.Generator,
                  *, spec: EnvSpec | None = None, reward_fn=None, cost_fn=None) -> Trajectory:
    """Roll one plan through ``x_{t+1} = model_eval(x_t, a_t) + sigma_w * noise``.

    Rewards and costs come from ``spec`` (the environment's own functions evaluated
    on model states) unless explicit functions are given; with neither they are 0.
    """
    x = np.asarray(x0, dtype=float)
    plan = np.asarray(plan, dtype=float).reshape(T, -1) if T else np.zeros((0, 1))
    if spec is not None:
        reward_fn = reward_fn or (lambda X, U: reward(spec, X, U))
        cost_fn = cost_fn or (lambda X, U: cost(spec, X, U))
    zero = lambda X, U: np.zeros(np.atleast_2d(X).shape[0])
    reward_fn, cost_fn = reward_fn or zero, cost_fn or zero
    states = [x]
    rs, cs = np.zeros(T), np.zeros(T)
    valid = True
    for t in range(T):
        a = plan[t]
        rs[t] = reward_fn(x[None], a[None])[0]
        cs[t] = cost_fn(x[None], a[None])[0]
        with np.errstate(all="ignore"):
            x = np.asarray(model_eval(np.concatenate([x, a])[None]), dtype=float).reshape(-1)
            x = x + sigma_w * rng.standard_normal(x.shape)
        if not np.isfinite(x).all():
            valid = False
            states.append(x)
            break
        states.append(x)
    return Trajectory(np.array(states), plan, rs, cs, valid)


@dataclass(frozen=True)
class McContext:
    """Common random numbers shared by every candidate scored in one optimization call."""

    x0_mean: np.ndarray      # (n_mean, d_x)
    noise_mean: np.ndarray   # (n_mean, T, d_x), already scaled by sigma_w
    x0_cost: np.ndarray      # (M, n_cost, d_x)
    noise_cost: np.ndarray   # (M, n_cost, T, d_x)
    model_noise: np.ndarray  # (M, n_cost, T, d_x) standard normals for the ts1 scheme

    @property
    def horizon(self) -> int:
        return self.noise_mean.shape[1]


def make_context(spec: EnvSpec, n_samples: int, mc: McConfig, rng: np.random.Generator, *,
                 horizon: int | None = None, x0=None) -> McContext:
    T = spec.horizon if horizon is None else horizon
    d = spec.d_x
    if x0 is None:
        x0_mean = env_reset(spec, rng, mc.n_mean)
        x0_cost = env_reset(spec, rng, n_samples * mc.n_cost).reshape(n_samples, mc.n_cost, d)
    else:
        x0 = np.asarray(x0, dtype=float)
        x0_mean = np.tile(x0, (mc.n_mean, 1))
        x0_cost = np.tile(x0, (n_samples, mc.n_cost, 1))
    noise_mean = spec.sigma_w * rng.standard_normal((mc.n_mean, T, d))
    noise_cost = spec.sigma_w * rng.standard_normal((n_samples, mc.n_cost, T, d))
    model_noise = (rng.standard_normal((n_samples, mc.n_cost, T, d)) if mc.scheme == "ts1"
                   else np.zeros((n_samples, mc.n_cost, 0, d)))
    return McContext(x0_mean, noise_mean, x0_cost, noise_cost, model_noise)


def _sanitize(X: np.ndarray, valid: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(X).all(axis=-1)
    if bad.any():
        valid &= ~bad
        X = np.where(bad[..., None], 0.0, X)
    return X


def estimate_returns(plans, samples: Sequence, gp, spec: EnvSpec, mc: McConfig,
                     rng: np.random.Generator | None = None, *, ctx: McContext | None = None,
                     reward_fn=None, cost_fn=None) -> ReturnEstimates:
    """Reward, per-sample cost and uncertainty returns of a plan or a batch of plans.

    ``gp`` is anything with ``predict(Z) -> (mean, std)``; it drives the mean
    rollouts that give J_r and J_s. Each entry of ``samples`` is a callable
    dynamics model giving one column of J_c. Under the ts1 scheme the sample
    list only fixes the number of particles: each step draws the next state
    from N(mu_n, sigma_n^2) instead.
    """
    if not len(samples):
        raise ValueError("need at least one dynamics sample")
    plans = np.asarray(plans, dtype=float)
    single = plans.ndim == 2
    if single:
        plans = plans[None]
    if ctx is None:
        ctx = make_context(spec, len(samples), mc, rng, horizon=plans.shape[1])
    P, T, d_a = plans.shape
    if T != ctx.horizon:
        raise ValueError(f"plan horizon {T} does not match context horizon {ctx.horizon}")
    d_x = spec.d_x
    M, n_cost = ctx.x0_cost.shape[:2]
    n_mean = ctx.x0_mean.shape[0]
    reward_fn = reward_fn or (lambda X, U: reward(spec, X, U))
    cost_fn = cost_fn or (lambda X, U: cost(spec, X, U))
    extra_s = spec.sigma_w * math.sqrt(d_x) if mc.uncertainty == "combined" else 0.0
    prior = getattr(gp, "prior", None)
    out_scale = prior.scale if prior is not None else np.ones(d_x)
    s_norm = float(np.sqrt((out_scale**2).sum()))

    # mean rollouts: rows ordered (plan, particle)
    U_mean = np.repeat(plans, n_mean, axis=0)
    X = np.tile(ctx.x0_mean, (P, 1))
    noise = np.tile(ctx.noise_mean, (P, 1, 1))
    valid_mean = np.ones(P * n_mean, dtype=bool)
    R = np.zeros(P * n_mean)
    Cm = np.zeros(P * n_mean)
    S = np.zeros(P * n_mean)
    # cost rollouts: one block of rows per sample, rows ordered (plan, particle)
    U_cost = np.repeat(plans, n_cost, axis=0)
    Xc = np.stack([np.tile(ctx.x0_cost[m], (P, 1)) for m in range(M)])
    valid_cost = np.ones((M, P * n_cost), dtype=bool)
    C = np.zeros((M, P * n_cost))
    with np.errstate(all="ignore"):
        for t in range(T):
            U = U_mean[:, t]
            R += reward_fn(X, U)
            Cm += cost_fn(X, U)
            mean, std = gp.predict(np.concatenate([X, U], axis=1))
            S += std * s_norm + extra_s
            X = _sanitize(mean + noise[:, t], valid_mean)

            Uc = U_cost[:, t]
            for m in range(M):
                C[m] += cost_fn(Xc[m], Uc)
            Zs = [np.concatenate([Xc[m], Uc], axis=1) for m in range(M)]
            if mc.scheme == "ts1":
                mu, sd = gp.predict(np.concatenate(Zs))
                nxt = mu.reshape(M, P * n_cost, d_x) + sd.reshape(M, P * n_cost, 1) * out_scale * np.stack(
                    [np.tile(ctx.model_noise[m, :, t], (P, 1)) for m in range(M)])
            else:
                nxt = np.stack(evaluate_samples(samples, Zs))
            nxt = nxt + np.stack([np.tile(ctx.noise_cost[m, :, t], (P, 1)) for m in range(M)])
            Xc = np.stack([_sanitize(nxt[m], valid_cost[m]) for m in range(M)])

    valid = valid_mean.reshape(P, n_mean).all(1) & valid_cost.reshape(M, P, n_cost).all(2).all(0)
    j_r = R.reshape(P, n_mean).mean(1)
    j_s = S.reshape(P, n_mean).mean(1)
    j_cm = Cm.reshape(P, n_mean).mean(1)
    j_c = C.reshape(M, P, n_cost).mean(2).T
    est = ReturnEstimates(j_r, j_c, j_s, n_mean, valid, j_cm)
    return est[0] if single else est


class MeanDynamics:
    """Deterministic dynamics given by the posterior mean.

    Means are computed through the same prefix-factor path used for truncation
    bands, so a sample clipped to a zero-width band around the latest posterior
    returns bit-identical values.
    """

    def __init__(self, gp):
        self.gp = gp
        self.d_x = gp.d_x

    def __call__(self, Z):
        return self.gp.nested_predict(np.atleast_2d(Z), [self.gp.n])[0][0]


# ---------------------------------------------------------------- objective


def penalized_score(est: ReturnEstimates, d: float, delta_tightening: float, d_sigma: float,
                    lambda_c: float, lambda_sigma: float, explore: bool = True):
    """J_r - lambda_c sum_m max(J_c^m - d + Delta, 0) - lambda_s max(d_sigma - J_s, 0)."""
    j_c = np.asarray(est.j_c, dtype=float)
    hinge = np.maximum(j_c - d + delta_tightening, 0.0).sum(axis=-1)
    score = np.asarray(est.j_r, dtype=float) - lambda_c * hinge
    if explore:
        score = score - lambda_sigma * np.maximum(d_sigma - np.asarray(est.j_s, dtype=float), 0.0)
    score = np.where(np.asarray(est.valid) & np.isfinite(score), score, -np.inf)
    return float(score) if score.ndim == 0 else score


def default_penalties(spec: EnvSpec) -> tuple[float, float]:
    return 100.0 * spec.R_max * spec.horizon, 10.0 * spec.R_max * spec.horizon


# ---------------------------------------------------------------- iCEM


def colored_noise(beta: float, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with power spectrum ~ 1/f^beta along the last axis, unit variance."""
    T = shape[-1]
    if T <= 1 or beta == 0:
        return rng.standard_normal(shape)
    f = np.fft.rfftfreq(T)
    f[0] = f[1]
    s = f ** (-beta / 2.0)
    # stationary variance of the inverse transform; DC and Nyquist terms count half
    c = np.ones_like(s)
    c[0] = 0.5
    if T % 2 == 0:
        c[-1] = 0.5
    sigma = 2 * math.sqrt((c * s * s).sum()) / T
    re = rng.standard_normal(shape[:-1] + (len(f),)) * s
    im = rng.standard_normal(shape[:-1] + (len(f),)) * s
    if T % 2 == 0:
        im[..., -1] = 0.0
        re[..., -1] *= math.sqrt(2)
    im[..., 0] = 0.0
    re[..., 0] *= math.sqrt(2)
    return np.fft.irfft(re + 1j * im, n=T, axis=-1) / sigma


@dataclass
class IcemResult:
    plan: np.ndarray
    score: float
    history: list
    elite_mean: np.ndarray
    elite_std: np.ndarray
    all_invalid: bool = False
    n_evaluated: int = 0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def shift_plan(plan: np.ndarray, steps: int = 1, fill=None) -> np.ndarray:
    """Drop the first ``steps`` actions and pad at the end (warm start between MPC calls)."""
    plan = np.asarray(plan, dtype=float)
    pad = plan[-1:] if fill is None else np.broadcast_to(fill, (1, plan.shape[1]))
    return np.concatenate([plan[steps:]] + [pad] * min(steps, len(plan)))[: len(plan)]


def icem_plan(score_fn: Callable, low, high, T: int, params: IcemParams,
              warm_start=None, rng: np.random.Generator | None = None,
              vectorized: bool = True, callback: Callable | None = None) -> IcemResult:
    """Maximize ``score_fn`` over action sequences in the box [low, high]^T.

    ``score_fn`` maps a (P, T, d_a) batch to P scores (or one plan to a scalar
    when ``vectorized`` is False). The returned plan is the best one ever
    evaluated; ``history[i]`` is the best-ever score after iteration i.
    """
    rng = rng or np.random.default_rng(0)
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    d_a = low.shape[0]
    half = (high - low) / 2.0

    def score(batch):
        if vectorized:
            return np.asarray(score_fn(batch), dtype=float).reshape(len(batch))
        return np.array([score_fn(p) for p in batch], dtype=float)

    mean = (np.broadcast_to((low + high) / 2.0, (T, d_a)).copy() if warm_start is None
            else np.clip(np.asarray(warm_start, dtype=float).reshape(T, d_a), low, high))
    std = np.broadcast_to(params.init_std * half, (T, d_a)).copy()
    best_plan, best_score = mean.copy(), -np.inf
    history = []
    kept = np.zeros((0, T, d_a))
    kept_scores = np.zeros(0)
    elites = mean[None]
    n_eval = 0
    for it in range(params.iterations):
        pop = max(int(params.population / params.pop_decay**it), params.n_elites)
        n_new = max(pop - len(kept), 1)
        # noise is colored along time, independently per action dimension
        eps = colored_noise(params.noise_beta, (n_new, d_a, T), rng).transpose(0, 2, 1)
        cand = np.clip(mean + std * eps, low, high)
        if it == 0 and warm_start is not None:
            cand[0] = mean
        if it == params.iterations - 1:
            cand[-1] = mean
        new_scores = score(cand)
        new_scores = np.where(np.isfinite(new_scores), new_scores, -np.inf)
        n_eval += len(cand)
        allc = np.concatenate([cand, kept])
        alls = np.concatenate([new_scores, kept_scores])
        order = np.argsort(-alls, kind="stable")
        top = order[: params.n_elites]
        elites, elite_scores = allc[top], alls[top]
        if alls[order[0]] > best_score:
            best_score = float(alls[order[0]])
            best_plan = allc[order[0]].copy()
        history.append(best_score)
        if callback is not None:
            callback(it, cand, new_scores)
        finite = np.isfinite(elite_scores)
        if finite.any():
            e = elites[finite]
            # spread around the previous mean keeps the search open while the mean is still moving
            spread = np.sqrt(((e - mean) ** 2).mean(0))
            mean = (1 - params.momentum) * e.mean(0) + params.momentum * mean
            std = (1 - params.momentum) * spread + params.momentum * std
            std = np.maximum(std, params.min_std * half)
        n_keep = int(round(params.keep_frac * params.n_elites))
        if params.shift_elites and n_keep:
            kept, kept_scores = elites[:n_keep], elite_scores[:n_keep]
        else:
            kept, kept_scores = np.zeros((0, T, d_a)), np.zeros(0)
    if not np.isfinite(best_score):
        fallback = mean if warm_start is None else np.clip(np.asarray(warm_start, float).reshape(T, d_a), low, high)
        return IcemResult(fallback, -math.inf, history, elites.mean(0), elites.std(0), True, n_eval, mean, std)
    return IcemResult(best_plan, best_score, history, elites.mean(0), elites.std(0), False, n_eval, mean, std)


# ---------------------------------------------------------------- feasibility probe


@dataclass(frozen=True)
class Thresholds:
    d: float
    delta_zeta: float
    d_sigma: float
    tol: float | None = None

    @property
    def tolerance(self) -> float:
        return 1e-3 * self.d if self.tol is None else self.tol

    @property
    def safe_level(self) -> float:
        return self.d - self.delta_zeta + self.tolerance


@dataclass
class ProbeResult:
    safe_feasible: bool
    explore_feasible: bool
    best_s: float
    best_plan: np.ndarray | None
    n_evaluated: int = 0


def feasibility_probe(samples, gp, spec: EnvSpec, thresholds: Thresholds, params: IcemParams,
                      rng: np.random.Generator, *, mc: McConfig = McConfig(),
                      warm_start=None, lambda_c: float | None = None,
                      ctx: McContext | None = None) -> ProbeResult:
    """Maximize J_s under the safety penalty and report feasibility of both constraints.

    The best safe uncertainty is the largest J_s over every evaluated candidate
    whose per-sample costs all stay within d - Delta + tol. With d_sigma <= 0 the
    exploration constraint is vacuous and only the warm start is evaluated.
    """
    T = spec.horizon
    if lambda_c is None:
        lambda_c = default_penalties(spec)[0]
    ctx = ctx or make_context(spec, len(samples), mc, rng)
    state = {"s": -math.inf, "plan": None, "n": 0}

    def record(plans, est):
        safe = est.valid & (est.j_c <= thresholds.safe_level).all(axis=1)
        state["n"] += len(plans)
        if safe.any():
            i = int(np.argmax(np.where(safe, est.j_s, -np.inf)))
            if est.j_s[i] > state["s"]:
                state["s"] = float(est.j_s[i])
                state["plan"] = plans[i].copy()

    def score(plans):
        est = estimate_returns(plans, samples, gp, spec, mc, ctx=ctx)
        record(plans, est)
        hinge = np.maximum(est.j_c - thresholds.d + thresholds.delta_zeta, 0.0).sum(1)
        return np.where(est.valid, est.j_s - lambda_c * hinge, -np.inf)

    warm = np.zeros((T, spec.d_a)) if warm_start is None else np.asarray(warm_start, dtype=float)
    if thresholds.d_sigma <= 0:
        score(warm[None])
    else:
        icem_plan(score, spec.low, spec.high, T, params, warm_start=warm, rng=rng)
    safe_ok = state["plan"] is not None
    best_s = state["s"] if safe_ok else 0.0
    explore_ok = thresholds.d_sigma <= 0 or (safe_ok and best_s >= thresholds.d_sigma - thresholds.tolerance)
    return ProbeResult(safe_ok, bool(explore_ok), best_s, state["plan"], state["n"])
