"""The episodic safe-exploration loop, its mean-only baseline and an oracle planner.

Each episode: update the sampled dynamics (truncate or resample), recompute the
schedules, probe feasibility, plan on the penalized objective, run the plan on
the true system once and refit the GP. The loop stops when no safe plan reaches
the exploration threshold, then returns a greedy plan that maximizes reward
under the safety constraint alone.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import envs
from .envs import EnvSpec
from .kernel_gp import GpPosterior, KernelSpec, PriorSpec, beta, gp_fit, info_gain
from .planner import (
    IcemParams,
    McConfig,
    MeanDynamics,
    Thresholds,
    default_penalties,
    estimate_returns,
    feasibility_probe,
    icem_plan,
    make_context,
    penalized_score,
    shift_plan,
)
from .sampler import (
    BudgetInputs,
    SmallBallConfig,
    draw_posterior_sample,
    draw_prior_sample,
    exploration_threshold,
    prior_layer,
    sample_budget,
    small_ball_exponent,
    tightening_delta,
)

DSIGMA_MODES = ("theory", "fixed", "zero")
BASELINES = ("sbsrl", "mean-only")

# purpose tags for child random streams
TAGS = {"reset": 1, "env": 2, "eval": 3, "plan": 4, "probe": 5, "greedy": 6,
        "sample": 7, "offline": 8, "warm": 9, "final": 10, "mpc": 11}


class ConfigError(ValueError):
    """The run configuration violates an invariant; the run refuses to start."""


class RunAbort(RuntimeError):
    """The run stopped on an unrecoverable runtime failure."""


def stream(root, tag: str, episode: int = 0, extra: int = 0) -> np.random.Generator:
    """Child generator for (purpose, episode, extra); independent of call order.

    ``root`` is an int seed or a tuple such as (master seed, run seed).
    """
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=(TAGS[tag], episode, extra)))


def child_seed(root, tag: str, episode: int = 0, extra: int = 0) -> int:
    ss = np.random.SeedSequence(root, spawn_key=(TAGS[tag], episode, extra))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec
    kernel: KernelSpec
    prior: PriorSpec
    delta: float = 0.1
    zeta: float = 1e-6
    eps: float = 1.0
    xi: float = 0.0
    M: int | str = 30
    margin: float | None = None
    dsigma_mode: str = "theory"
    dsigma_value: float = 0.0
    resample_each_episode: bool = False
    baseline: str = "sbsrl"
    max_episodes: int = 30
    seed: int = 0
    master_seed: int = 0
    sampling: str = "rff"
    n_features: int = 256
    beta_scale: float = 1.0
    planner: IcemParams = IcemParams()
    probe: IcemParams = IcemParams()
    mc: McConfig = McConfig()
    lambda_c: float | None = None
    lambda_sigma: float | None = None
    n_eval: int = 200
    warm_gains: tuple = ()
    offline_episodes: int = 0
    offline_gains: tuple = ()
    offline_excitation: float = 0.1
    mpc: bool = False
    after_infeasible: str = "greedy"
    small_ball: SmallBallConfig = SmallBallConfig()
    record_timing: bool = False

    def validate(self) -> None:
        if not 0 < self.delta < 0.5:
            raise ConfigError(f"delta must lie in (0, 1/2), got {self.delta}")
        if self.zeta < 0 or (self.zeta == 0 and self.baseline == "sbsrl" and self.M == "auto"):
            raise ConfigError("zeta must be positive (zero only with an explicit sample count)")
        if self.max_episodes < 1:
            raise ConfigError("max_episodes must be at least 1")
        if self.dsigma_mode not in DSIGMA_MODES:
            raise ConfigError(f"dsigma mode must be one of {DSIGMA_MODES}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.sampling not in ("rff", "pathwise"):
            raise ConfigError("sampling must be 'rff' or 'pathwise'")
        if self.M != "auto" and (not isinstance(self.M, (int, np.integer)) or self.M < 1):
            raise ConfigError("M must be a positive integer or 'auto'")
        if self.beta_scale < 0:
            raise ConfigError("beta_scale must be nonnegative")
        if self.dsigma_mode == "theory" and self.beta_scale == 0:
            raise ConfigError("theory-mode exploration threshold needs beta_scale > 0")
        if self.dsigma_mode == "fixed" and self.dsigma_value < 0:
            raise ConfigError("fixed exploration threshold must be nonnegative")
        if self.after_infeasible not in ("greedy", "stop"):
            raise ConfigError("after_infeasible must be 'greedy' or 'stop'")
        if self.prior.d_x != self.env.d_x or self.kernel.input_dim != self.env.input_dim:
            raise ConfigError("kernel/prior dimensions do not match the environment")
        if self.margin is not None and not 0 < self.margin < self.env.budget:
            raise ConfigError(f"margin must lie in (0, {self.env.budget}), got {self.margin}")
        if self.margin is not None and self.baseline == "sbsrl":
            e = self.env
            bound = e.sigma_w * self.margin / (math.sqrt(e.d_x) * e.horizon**2 * e.C_max)
            if not self.zeta < bound:
                raise ConfigError(f"zeta must lie in (0, {bound:.3g}) for margin {self.margin}")

    @property
    def root(self) -> tuple:
        return (int(self.master_seed), int(self.seed))

    @property
    def penalties(self) -> tuple[float, float]:
        lc, ls = default_penalties(self.env)
        return (lc if self.lambda_c is None else self.lambda_c,
                ls if self.lambda_sigma is None else self.lambda_sigma)

    @property
    def delta_zeta(self) -> float:
        if self.baseline == "mean-only" or self.zeta == 0:
            return 0.0
        e = self.env
        return tightening_delta(self.zeta, e.d_x, e.horizon, e.C_max, e.sigma_w)


@dataclass
class EpisodeLog:
    episode: int
    planned_score: float
    j_c_planned: np.ndarray
    j_s_planned: float
    j_r_true: float
    j_c_true: float
    reward_sum: float
    cost_sum: float
    max_inst_cost: float
    beta_n: float
    d_sigma_n: float
    delta_zeta: float
    feasible_safe: bool
    feasible_explore: bool
    terminated: bool = False
    fallback: str = ""
    wall_time_s: float = 0.0
    se_c_true: float = 0.0
    best_safe_s: float = 0.0


@dataclass
class RunResult:
    logs: list
    greedy_plan: np.ndarray
    reason: str
    greedy_j_r: float = math.nan
    greedy_j_c: float = math.nan
    M: int = 0
    info: dict = field(default_factory=dict)


def dsigma_schedule(n: int, cfg: RunConfig, beta_n: float) -> float:
    if cfg.dsigma_mode == "zero":
        return 0.0
    if cfg.dsigma_mode == "fixed":
        return float(cfg.dsigma_value)
    e = cfg.env
    return exploration_threshold(cfg.eps, e.sigma_w, e.G_max, e.horizon, beta_n)


def resolve_M(cfg: RunConfig) -> int:
    if cfg.baseline == "mean-only":
        return 1
    if cfg.M != "auto":
        return int(cfg.M)
    phi = small_ball_exponent(cfg.kernel, cfg.zeta, cfg.small_ball)
    return sample_budget(BudgetInputs(cfg.delta, cfg.zeta, cfg.prior.B, cfg.env.d_x, phi))


def beta_n(cfg: RunConfig, gp: GpPosterior, n: int) -> float:
    gamma = info_gain(cfg.kernel, gp.Z, cfg.prior.sigma_w) if gp.n else 0.0
    return cfg.beta_scale * beta(n, cfg.env.horizon, cfg.prior, cfg.delta, gamma, cfg.env.d_x)


def warm_plan(cfg: RunConfig) -> np.ndarray:
    e = cfg.env
    if not cfg.warm_gains:
        return np.zeros((e.horizon, e.d_a))
    return envs.pd_plan(e, cfg.warm_gains, cfg.prior.mean)


def _draw_samples(cfg: RunConfig, gp: GpPosterior, M: int, episode: int, beta_prior: float,
                  beta_now: float) -> list:
    if cfg.baseline == "mean-only":
        return [MeanDynamics(gp)]
    out = []
    for m in range(M):
        seed = child_seed(cfg.root, "sample", episode, m)
        if cfg.resample_each_episode:
            s = draw_posterior_sample(gp, seed, mode=cfg.sampling, n_features=cfg.n_features, sample_id=m)
        else:
            s = draw_prior_sample(cfg.prior, cfg.kernel, seed, mode=cfg.sampling,
                                  n_features=cfg.n_features, sample_id=m)
            s.truncate(prior_layer(cfg.prior, cfg.kernel), beta_prior)
            if gp.n:
                s.truncate(gp, beta_now)
        out.append(s)
    return out


class _Planner:
    """Scoring helpers bound to one episode's samples, model and thresholds."""

    def __init__(self, cfg: RunConfig, samples, gp, thr: Thresholds, rng=None, *, horizon=None,
                 x0=None, ctx=None):
        self.cfg, self.samples, self.gp, self.thr = cfg, samples, gp, thr
        self.horizon = cfg.env.horizon if horizon is None else horizon
        self.spec = cfg.env if horizon is None else replace(cfg.env, horizon=self.horizon)
        self.ctx = ctx or make_context(self.spec, len(samples), cfg.mc, rng, x0=x0)

    def estimate(self, plans):
        return estimate_returns(plans, self.samples, self.gp, self.spec, self.cfg.mc, ctx=self.ctx)

    def score_fn(self, explore: bool):
        lc, ls = self.cfg.penalties

        def score(plans):
            est = self.estimate(plans)
            return penalized_score(est, self.thr.d, self.thr.delta_zeta, self.thr.d_sigma, lc, ls, explore)
        return score

    def is_safe(self, est) -> bool:
        return bool(est.valid and (est.j_c <= self.thr.safe_level).all())

    def plan(self, params: IcemParams, warm, rng, explore: bool):
        res = icem_plan(self.score_fn(explore), self.spec.low, self.spec.high, self.horizon, params,
                        warm_start=warm, rng=rng)
        return res, self.estimate(res.plan)


def _choose(planner: _Planner, res, est, fallbacks, explore: bool):
    """Keep the optimizer's plan if it meets the constraints, else the first safe fallback."""
    ok = planner.is_safe(est) and (not explore or est.j_s >= planner.thr.d_sigma - planner.thr.tolerance)
    if ok:
        return res.plan, est, ""
    for name, plan in fallbacks:
        if plan is None:
            continue
        e = planner.estimate(plan)
        if planner.is_safe(e):
            return np.asarray(plan), e, name
    return res.plan, est, "unsafe"


def _evaluate(cfg: RunConfig, plan, rng):
    if cfg.n_eval <= 0:
        return None
    return envs.evaluate_policy_true(cfg.env, plan, cfg.n_eval, rng)


def _execute(cfg: RunConfig, plan, rng, planner_factory=None):
    """Run one episode on the true system; with ``mpc`` the plan is re-optimized every step."""
    e = cfg.env
    x = envs.env_reset(e, rng)
    Zs, Ys, rs, cs = [], [], [], []
    current = np.array(plan)
    for t in range(e.horizon):
        if planner_factory is None:
            a = current[t]
        else:
            if t > 0:
                current = planner_factory(t, x, sum(cs), shift_plan(current, 1)[: e.horizon - t])
            a = current[0]
        tr = envs.env_step(e, x, a, rng)
        Zs.append(np.concatenate([tr.state, tr.action]))
        Ys.append(tr.next_state)
        rs.append(tr.reward)
        cs.append(tr.cost)
        x = tr.next_state
    return np.array(Zs), np.array(Ys), float(sum(rs)), float(sum(cs)), float(max(cs))


def validate_warm_start(cfg: RunConfig, samples, gp, plan) -> float:
    """Worst planned cost of the warm-start plan over the samples and the prior mean."""
    mean_model = MeanDynamics(gp) if gp.n else _PriorMeanModel(cfg.prior)
    models = list(samples) + [mean_model]
    est = estimate_returns(plan, models, gp, cfg.env, cfg.mc, stream(cfg.root, "warm"))
    worst = float(np.max(est.j_c))
    need = cfg.env.budget - (cfg.margin if cfg.margin is not None else cfg.delta_zeta)
    if not est.valid or worst > need:
        raise ConfigError(
            f"warm-start plan is not safe enough: planned cost {worst:.4g} exceeds {need:.4g}")
    return worst


class _PriorMeanModel:
    def __init__(self, prior: PriorSpec):
        self.prior = prior

    def __call__(self, Z):
        return self.prior.mean(np.atleast_2d(Z))


def sbsrl_run(cfg: RunConfig, sink: Callable | None = None) -> RunResult:
    """Run the safe exploration loop; ``sink`` receives each EpisodeLog as it completes."""
    cfg.validate()
    e = cfg.env
    M = resolve_M(cfg)
    if cfg.offline_episodes:
        Z, Y = envs.offline_dataset(e, cfg.offline_gains or cfg.warm_gains or np.zeros((e.d_a, e.d_x)),
                                    cfg.offline_episodes, stream(cfg.root, "offline"),
                                    cfg.offline_excitation)
    else:
        Z, Y = np.zeros((0, e.input_dim)), np.zeros((0, e.d_x))
    try:
        gp = gp_fit(cfg.prior, cfg.kernel, Z, Y, n_episodes=0, d_a=e.d_a)
    except ArithmeticError as err:
        raise RunAbort(f"GP fit failed: {err}") from err
    beta_prior = cfg.beta_scale * cfg.prior.B
    b_n = beta_n(cfg, gp, 0)
    samples = _draw_samples(cfg, gp, M, 0, beta_prior, b_n)
    warm = warm_plan(cfg)
    validate_warm_start(cfg, samples, gp, warm)
    d_zeta = cfg.delta_zeta
    logs: list[EpisodeLog] = []
    prev_plan = warm
    reason = "max-episodes"
    timings = []
    for n in range(cfg.max_episodes):
        t0 = time.perf_counter()
        if n > 0:
            b_n = beta_n(cfg, gp, n)
            if cfg.baseline == "mean-only":
                samples = [MeanDynamics(gp)]
            elif cfg.resample_each_episode:
                samples = _draw_samples(cfg, gp, M, n, beta_prior, b_n)
            else:
                for s in samples:
                    s.truncate(gp, b_n)
        d_sig = dsigma_schedule(n, cfg, b_n)
        thr = Thresholds(e.budget, d_zeta, d_sig)
        probe_planner = _Planner(cfg, samples, gp, thr, stream(cfg.root, "probe", n))
        probe = feasibility_probe(samples, gp, e, thr, cfg.probe, stream(cfg.root, "probe", n, 1),
                                  mc=cfg.mc, warm_start=prev_plan, lambda_c=cfg.penalties[0],
                                  ctx=probe_planner.ctx)
        if not probe.explore_feasible:
            reason = "exploration-infeasible"
            break
        planner = _Planner(cfg, samples, gp, thr, ctx=probe_planner.ctx)
        res, est = planner.plan(cfg.planner, prev_plan, stream(cfg.root, "plan", n, 1), explore=True)
        plan, est, fallback = _choose(planner, res, est,
                                      [("probe", probe.best_plan), ("warm", warm)], explore=True)
        mpc = None
        if cfg.mpc:
            mpc = _mpc_factory(cfg, samples, gp, d_zeta, n)
        Zn, Yn, r_sum, c_sum, c_max = _execute(cfg, plan, stream(cfg.root, "env", n), mpc)
        ev = _evaluate(cfg, plan, stream(cfg.root, "eval", n))
        log = EpisodeLog(
            episode=n, planned_score=float(res.score), j_c_planned=np.atleast_1d(est.j_c),
            j_s_planned=float(est.j_s),
            j_r_true=ev.j_r if ev else r_sum, j_c_true=ev.j_c if ev else c_sum,
            reward_sum=r_sum, cost_sum=c_sum, max_inst_cost=c_max,
            beta_n=b_n, d_sigma_n=d_sig, delta_zeta=d_zeta,
            feasible_safe=probe.safe_feasible, feasible_explore=probe.explore_feasible,
            fallback=fallback, se_c_true=ev.se_c if ev else 0.0, best_safe_s=probe.best_s,
        )
        try:
            gp = gp_fit(cfg.prior, cfg.kernel, np.vstack([gp.Z, Zn]), np.vstack([gp.Y, Yn]),
                        n_episodes=n + 1, d_a=e.d_a)
        except ArithmeticError as err:
            raise RunAbort(f"GP fit failed after episode {n}: {err}") from err
        prev_plan = plan
        log.wall_time_s = time.perf_counter() - t0
        timings.append(log.wall_time_s)
        if not cfg.record_timing:
            log.wall_time_s = 0.0
        logs.append(log)
        if sink:
            sink(log)
    else:
        n = cfg.max_episodes
        b_n = beta_n(cfg, gp, n)
        if cfg.baseline == "mean-only":
            samples = [MeanDynamics(gp)]
        elif cfg.resample_each_episode:
            samples = _draw_samples(cfg, gp, M, n, beta_prior, b_n)
        else:
            for s in samples:
                s.truncate(gp, b_n)
        d_sig = dsigma_schedule(n, cfg, b_n)
        probe = None

    if reason == "exploration-infeasible" and cfg.after_infeasible == "stop":
        return RunResult(logs, prev_plan, reason, M=M, info={"timings": timings, "gp_n": gp.n})
    thr = Thresholds(e.budget, d_zeta, d_sig)
    greedy = _Planner(cfg, samples, gp, thr, stream(cfg.root, "greedy", n))
    res, est = greedy.plan(cfg.planner, prev_plan, stream(cfg.root, "greedy", n, 1), explore=False)
    fallbacks = [("previous", prev_plan), ("warm", warm)]
    if probe is not None:
        fallbacks.insert(0, ("probe", probe.best_plan))
    plan, est, fallback = _choose(greedy, res, est, fallbacks, explore=False)
    ev = _evaluate(cfg, plan, stream(cfg.root, "final", n))
    result = RunResult(logs, plan, reason, ev.j_r if ev else math.nan, ev.j_c if ev else math.nan, M,
                       info={"timings": timings, "gp_n": gp.n, "greedy_fallback": fallback})
    if reason == "exploration-infeasible":
        log = EpisodeLog(
            episode=n, planned_score=float(res.score), j_c_planned=np.atleast_1d(est.j_c),
            j_s_planned=float(est.j_s),
            j_r_true=ev.j_r if ev else float(est.j_r), j_c_true=ev.j_c if ev else float(np.max(est.j_c)),
            reward_sum=0.0, cost_sum=0.0, max_inst_cost=float(ev.max_cost.max()) if ev else 0.0,
            beta_n=b_n, d_sigma_n=d_sig, delta_zeta=d_zeta,
            feasible_safe=probe.safe_feasible, feasible_explore=False, terminated=True,
            fallback=fallback, se_c_true=ev.se_c if ev else 0.0, best_safe_s=probe.best_s,
        )
        logs.append(log)
        if sink:
            sink(log)
    return result


def baseline_mean_run(cfg: RunConfig, sink: Callable | None = None) -> RunResult:
    """Same loop with the cost constraint enforced on the posterior mean only."""
    return sbsrl_run(replace(cfg, baseline="mean-only"), sink)


def _mpc_factory(cfg: RunConfig, samples, gp, d_zeta: float, episode: int):
    """Per-step replanning of the remaining horizon from the observed state.

    The remaining budget is d minus the cost already incurred; the exploration
    term only shapes the initial plan.
    """
    e = cfg.env

    def replan(t, x, spent, warm):
        horizon = e.horizon - t
        thr = Thresholds(e.budget - spent, d_zeta, 0.0, tol=1e-3 * e.budget)
        p = _Planner(cfg, samples, gp, thr, stream(cfg.root, "mpc", episode, 2 * t), horizon=horizon, x0=x)
        res, est = p.plan(cfg.planner, warm[:horizon], stream(cfg.root, "mpc", episode, 2 * t + 1),
                          explore=False)
        plan, _, _ = _choose(p, res, est, [("shifted", warm[:horizon])], explore=False)
        return plan

    return replan


def oracle_plan(cfg: RunConfig, params: IcemParams | None = None, seed: int | None = None,
                mc: McConfig = McConfig(n_mean=10, n_cost=20)):
    """iCEM on the true dynamics with the exact budget; returns (plan, evaluation).

    The budget is checked on ``mc.n_cost`` noisy rollouts, more than the learner
    uses, so the oracle plan itself stays within the budget under evaluation.
    """
    e = cfg.env
    seed = cfg.root if seed is None else seed
    cfg = replace(cfg, mc=mc)
    truth = envs.TrueModel(e)
    thr = Thresholds(e.budget, 0.0, 0.0)
    planner = _Planner(cfg, [truth], truth, thr, stream(seed, "plan", 10**6))
    res, est = planner.plan(params or cfg.planner, warm_plan(cfg), stream(seed, "plan", 10**6, 1),
                            explore=False)
    plan, _, _ = _choose(planner, res, est, [("warm", warm_plan(cfg))], explore=False)
    return plan, _evaluate(replace(cfg, n_eval=max(cfg.n_eval, 1)), plan, stream(seed, "final", 10**6))
