"""Experiment configuration: flat dotted keys in a TOML file, validated against a typed schema.

A file may spell keys either as ``env.horizon = 20`` or inside ``[env]`` tables;
both flatten to the same dotted key. Unknown keys are rejected so typos surface
as configuration errors rather than silently ignored settings.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import envs
from .kernel_gp import KernelSpec, PriorSpec, ZeroMean
from .loop import ConfigError, RunConfig
from .planner import IcemParams, McConfig
from .sampler import SmallBallConfig

_NUM = (int, float)
_LIST = (list,)

# key -> (accepted types, default); a default of None means "use the built-in value"
SCHEMA: dict = {
    "run.seed": (int, 0),
    "run.seeds": (_LIST, None),
    "run.max_episodes": (int, 30),
    "run.baseline": (str, "sbsrl"),
    "run.n_eval": (int, 200),
    "run.record_timing": (bool, False),
    "run.mpc": (bool, False),
    "run.after_infeasible": (str, "greedy"),
    "run.wall_clock_budget_s": (_NUM, 0.0),
    "run.name": (str, None),
    "env.kind": (str, "pendulum"),
    "env.horizon": (int, None),
    "env.sigma_w": (_NUM, 0.01),
    "env.budget": (_NUM, None),
    "env.mass": (_NUM, None),
    "env.length": (_NUM, None),
    "env.gravity": (_NUM, None),
    "env.dt": (_NUM, None),
    "env.cart_mass": (_NUM, None),
    "env.pole_mass": (_NUM, None),
    "env.action_low": (_LIST, None),
    "env.action_high": (_LIST, None),
    "env.rho0_mean": (_LIST, None),
    "env.rho0_std": (_LIST, None),
    "env.state_high": (_LIST, None),
    "env.theta_target": (_NUM, 0.0),
    "gp.kernel": (str, "se"),
    "gp.lengthscales": (_LIST, None),
    "gp.variance": (_NUM, 1.0),
    "gp.B": (_NUM, 1.0),
    "gp.mean": (str, "linearized"),
    "gp.output_scale": (_LIST, None),
    "gp.angle_dims": (_LIST, None),
    "algo.delta": (_NUM, 0.1),
    "algo.zeta": (_NUM, 1e-6),
    "algo.eps": (_NUM, 1.0),
    "algo.xi": (_NUM, 0.0),
    "algo.M": ((int, str), 30),
    "algo.margin": (_NUM, None),
    "algo.dsigma_mode": (str, "theory"),
    "algo.dsigma_value": (_NUM, 0.0),
    "algo.resample_each_episode": (bool, False),
    "algo.sampling": (str, "rff"),
    "algo.n_features": (int, 256),
    "algo.beta_scale": (_NUM, 1.0),
    "algo.lambda_c": (_NUM, None),
    "algo.lambda_sigma": (_NUM, None),
    "mc.n_mean": (int, 5),
    "mc.n_cost": (int, 3),
    "mc.scheme": (str, "per-sample"),
    "mc.uncertainty": (str, "epistemic"),
    "warm_start.gains": (_LIST, None),
    "offline.episodes": (int, 0),
    "offline.gains": (_LIST, None),
    "offline.excitation": (_NUM, 0.1),
    "small_ball.n_draws": (int, 4000),
    "small_ball.n_grid": (int, 64),
    "small_ball.lower": (_LIST, None),
    "small_ball.upper": (_LIST, None),
    "small_ball.seed": (int, 0),
    "compare.dsigma_values": (_LIST, None),
}
_ICEM_FIELDS = {"population": int, "elite_frac": _NUM, "iterations": int, "init_std": _NUM,
                "noise_beta": _NUM, "shift_elites": bool, "keep_frac": _NUM, "momentum": _NUM,
                "pop_decay": _NUM, "min_std": _NUM}
for _sec in ("planner", "probe"):
    for _k, _t in _ICEM_FIELDS.items():
        SCHEMA[f"{_sec}.{_k}"] = (_t, None)
PREFIXES = ("gp.mismatch.",)


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _check_type(key: str, value, types) -> None:
    types = types if isinstance(types, tuple) else (types,)
    if bool in types:
        ok = isinstance(value, bool)
    else:
        ok = isinstance(value, types) and not isinstance(value, bool)
    if not ok:
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"config key {key!r} must be {names}, got {value!r}")


def validate_flat(flat: dict) -> dict:
    for key, value in flat.items():
        if key in SCHEMA:
            _check_type(key, value, SCHEMA[key][0])
        elif key.startswith(PREFIXES):
            _check_type(key, value, _NUM)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return flat


def load_flat(path) -> dict:
    try:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config file {path} is not valid: {err}") from err
    return validate_flat(flatten(tree))


def get(flat: dict, key: str):
    return flat.get(key, SCHEMA[key][1])


def _icem(flat: dict, section: str, base: IcemParams = IcemParams()) -> IcemParams:
    kw = {k: flat[f"{section}.{k}"] for k in _ICEM_FIELDS if f"{section}.{k}" in flat}
    vals = {**base.__dict__, **kw}
    return IcemParams(**vals)


def build_env(flat: dict) -> envs.EnvSpec:
    kind = get(flat, "env.kind")
    if kind not in ("pendulum", "cartpole"):
        raise ConfigError(f"env.kind must be 'pendulum' or 'cartpole' for experiment runs, got {kind!r}")
    kw = {}
    for key in ("horizon", "budget", "mass", "length", "gravity", "dt", "cart_mass", "pole_mass",
                "action_low", "action_high", "rho0_mean", "rho0_std", "state_high"):
        v = get(flat, f"env.{key}")
        if v is not None:
            kw[key] = v
    kw["sigma_w"] = float(get(flat, "env.sigma_w"))
    kw["theta_target"] = float(get(flat, "env.theta_target"))
    try:
        return envs.make_env(kind, **kw)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"invalid environment settings: {err}") from err


def build_run_config(flat: dict, seed: int | None = None, master_seed: int | None = None) -> RunConfig:
    """Assemble and validate a RunConfig from a flat key dict."""
    env = build_env(flat)
    try:
        ls = get(flat, "gp.lengthscales") or [1.0] * env.input_dim
        angle = get(flat, "gp.angle_dims")
        kernel = KernelSpec(get(flat, "gp.kernel"), tuple(ls), float(get(flat, "gp.variance")),
                            tuple(env.angle_dims if angle is None else angle))
        mean_kind = get(flat, "gp.mean")
        mismatch = {k[len("gp.mismatch."):]: float(v) for k, v in flat.items()
                    if k.startswith("gp.mismatch.")}
        if mean_kind == "linearized":
            mean = envs.linearized_prior_mean(env, mismatch)
        elif mean_kind == "identity":
            mean = envs.identity_prior_mean(env)
        elif mean_kind == "zero":
            mean = ZeroMean(env.d_x)
        else:
            raise ConfigError(f"gp.mean must be linearized, identity or zero, got {mean_kind!r}")
        out_scale = get(flat, "gp.output_scale")
        prior = PriorSpec(mean, float(get(flat, "gp.B")), env.sigma_w,
                          None if out_scale is None else tuple(out_scale))
        M = get(flat, "algo.M")
        if isinstance(M, str) and M != "auto":
            raise ConfigError("algo.M must be an integer or 'auto'")
        gains = get(flat, "warm_start.gains")
        off_gains = get(flat, "offline.gains")
        lo, hi = get(flat, "small_ball.lower"), get(flat, "small_ball.upper")
        sb = SmallBallConfig(get(flat, "small_ball.n_draws"), get(flat, "small_ball.n_grid"),
                             tuple(lo) if lo else (-1.0,), tuple(hi) if hi else (1.0,),
                             get(flat, "small_ball.seed"))
        margin = get(flat, "algo.margin")
        cfg = RunConfig(
            env=env, kernel=kernel, prior=prior,
            delta=float(get(flat, "algo.delta")), zeta=float(get(flat, "algo.zeta")),
            eps=float(get(flat, "algo.eps")), xi=float(get(flat, "algo.xi")), M=M,
            margin=None if margin is None else float(margin),
            dsigma_mode=get(flat, "algo.dsigma_mode"), dsigma_value=float(get(flat, "algo.dsigma_value")),
            resample_each_episode=get(flat, "algo.resample_each_episode"),
            baseline=get(flat, "run.baseline"), max_episodes=get(flat, "run.max_episodes"),
            seed=get(flat, "run.seed") if seed is None else seed,
            master_seed=0 if master_seed is None else master_seed,
            sampling=get(flat, "algo.sampling"), n_features=get(flat, "algo.n_features"),
            beta_scale=float(get(flat, "algo.beta_scale")),
            planner=_icem(flat, "planner"), probe=_icem(flat, "probe"),
            mc=McConfig(get(flat, "mc.n_mean"), get(flat, "mc.n_cost"), get(flat, "mc.scheme"),
                        get(flat, "mc.uncertainty")),
            lambda_c=get(flat, "algo.lambda_c"), lambda_sigma=get(flat, "algo.lambda_sigma"),
            n_eval=get(flat, "run.n_eval"),
            warm_gains=() if gains is None else tuple(map(tuple, np.atleast_2d(gains).tolist())),
            offline_episodes=get(flat, "offline.episodes"),
            offline_gains=() if off_gains is None else tuple(map(tuple, np.atleast_2d(off_gains).tolist())),
            offline_excitation=float(get(flat, "offline.excitation")),
            mpc=get(flat, "run.mpc"), after_infeasible=get(flat, "run.after_infeasible"),
            small_ball=sb, record_timing=get(flat, "run.record_timing"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as err:
        raise ConfigError(str(err)) from err
    cfg.validate()
    return cfg


def load_run_config(path, seed: int | None = None, master_seed: int | None = None) -> RunConfig:
    return build_run_config(load_flat(path), seed, master_seed)


def default_config_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "configs"
