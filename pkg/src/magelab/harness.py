"""Experiment runner: configs, evaluation protocol, gradient-error metric, CSV/JSON output, CLI.

CSV schema (one file per seed, ``metrics_seed<k>.csv``), floats with 9
significant digits, LF line endings, ``grad_error_L`` empty when not measured:

    env_step, critic_updates, mean_eval_return, smoothed_return, grad_error_L,
    critic_loss, mean_abs_td, mean_grad_td_norm, mean_grad_q_norm

Every diagnostic is a snapshot taken at the row's step on a fixed held-out
batch of states, so rows never depend on how many updates happened since the
previous row.  Wall-clock time goes to ``timing.json`` and never into the CSV
or ``run.json``, which keeps those byte-identical across repeated runs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import agents
from . import autodiff as ad
from . import envs, nets
from .replay import ReplayBuffer

CSV_COLUMNS = ("env_step", "critic_updates", "mean_eval_return", "smoothed_return", "grad_error_L",
               "critic_loss", "mean_abs_td", "mean_grad_td_norm", "mean_grad_q_norm")
SOLVED_BAR = {"pendulum": -200.0}
DIAGNOSTIC_BATCH = 512

ConfigError = agents.ConfigError


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class GradEvalConfig:
    enabled: bool = False
    interval: int = 10              # critic-update rounds between measurements
    trajectories: int = 10
    initial_transitions: int = 200
    fixed_actor: bool = False
    horizon: int | None = None      # defaults to the env horizon


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    variant: str = "mage"
    oracle_dynamics: bool = False
    learned_reward: bool = False
    lam: float | None = None        # None -> the variant default (0.2 for MAGE)
    steps: int = 20000
    seeds: tuple[int, ...] = (0,)
    eval_interval: int = 1000
    eval_episodes: int = 10
    horizon: int | None = None
    smoothing_window: int = 25
    buffer_capacity: int = 1_000_000
    out_dir: str = "runs/default"
    save_checkpoint: bool = False
    grad_eval: GradEvalConfig = field(default_factory=GradEvalConfig)
    hp: agents.Hyperparams = field(default_factory=agents.Hyperparams)

    def resolved_hp(self) -> agents.Hyperparams:
        hp = dataclasses.replace(self.hp, actor_hidden=tuple(self.hp.actor_hidden),
                                 critic_hidden=tuple(self.hp.critic_hidden),
                                 model_hidden=tuple(self.hp.model_hidden),
                                 reward_hidden=tuple(self.hp.reward_hidden))
        if self.lam is not None:
            hp.lam = self.lam
        if self.grad_eval.enabled:
            hp.warmup_steps = self.grad_eval.initial_transitions
        return hp

    def env_instance(self) -> envs.Env:
        return envs.make_env(self.env, **({} if self.horizon is None else {"horizon": self.horizon}))

    def validate(self) -> None:
        if self.env not in envs.ENVS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {sorted(envs.ENVS)}")
        if self.variant not in agents.VARIANTS:
            raise ConfigError(f"unknown agent {self.variant!r}; choose from {agents.VARIANTS}")
        if self.lam is not None and self.variant not in agents.GRADIENT_CRITIC:
            raise ConfigError(f"lambda only applies to MAGE critics, not {self.variant!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        hp = self.resolved_hp()
        hp.validate()
        # steps = 0 is a dry run that writes headers and the manifest
        if 0 < self.steps < hp.warmup_steps:
            raise ConfigError(f"steps ({self.steps}) must cover the warmup ({hp.warmup_steps})")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.eval_interval < 1 or self.eval_episodes < 1 or self.smoothing_window < 1:
            raise ConfigError("eval_interval, eval_episodes and smoothing_window must be >= 1")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        ge = self.grad_eval
        if ge.enabled:
            if ge.interval < 1 or ge.trajectories < 1 or ge.initial_transitions < 0:
                raise ConfigError("invalid grad_eval settings")
            if ge.horizon is not None and ge.horizon < 1:
                raise ConfigError("grad_eval horizon must be >= 1")
        if ge.fixed_actor and not ge.enabled:
            raise ConfigError("fixed_actor is part of the gradient-accuracy protocol; enable grad_eval")
        if ge.enabled and self.variant not in agents.MODEL_BASED:
            raise ConfigError("the gradient-accuracy protocol compares model-based critics")
        # raises on invalid variant combinations
        agents.make_agent(self.variant, self.env_instance(), hp, np.random.default_rng(0),
                          oracle=self.oracle_dynamics, learned_reward=self.learned_reward,
                          fixed_actor=ge.fixed_actor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


ALIASES = {"agent": "variant", "lambda": "lam", "seed": "seeds", "oracle": "oracle_dynamics", "out": "out_dir"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_typed(text: str, current, annotation: str):
    text = text.strip()
    if "tuple" in annotation:
        return tuple(int(x) for x in text.replace("(", "").replace(")", "").split(",") if x.strip())
    if "bool" in annotation:
        return _parse_bool(text)
    if text.lower() in ("none", "null", "") and "None" in annotation:
        return None
    if "int" in annotation and "float" not in annotation:
        return int(text)
    if "float" in annotation:
        return float(text)
    return text


def _field_types(obj) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(obj)}


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Set fields from ``key = value`` strings; nested fields use dots (``hp.batch_size``)."""
    cfg = dataclasses.replace(cfg, grad_eval=dataclasses.replace(cfg.grad_eval), hp=dataclasses.replace(cfg.hp))
    for raw_key, value in overrides.items():
        key = ALIASES.get(raw_key.strip(), raw_key.strip())
        target = cfg
        if "." in key:
            head, key = key.split(".", 1)
            if head not in ("hp", "grad_eval"):
                raise ConfigError(f"unknown config section {head!r}")
            target = getattr(cfg, head)
        types = _field_types(target)
        if key not in types:
            if target is cfg and key in _field_types(cfg.hp):
                target, types = cfg.hp, _field_types(cfg.hp)
            else:
                raise ConfigError(f"unknown config key {raw_key!r}")
        try:
            parsed = _parse_typed(value, getattr(target, key), types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {raw_key!r}: {value!r}") from exc
        setattr(target, key, parsed)
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: list[str] | tuple[str, ...] = ()) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    cfg = apply_overrides(ExperimentConfig(), values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    env_step: int
    critic_updates: int
    mean_eval_return: float
    smoothed_return: float
    grad_error_L: float | None
    critic_loss: float
    mean_abs_td: float
    mean_grad_td_norm: float
    mean_grad_q_norm: float
    wall_seconds: float = 0.0   # kept out of the CSV

    def csv_fields(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, int):
                out.append(str(v))
            else:
                out.append(f"{v:.9g}")
        return out

    @classmethod
    def from_csv(cls, record: dict[str, str]) -> "MetricsRow":
        kw = {}
        for name in CSV_COLUMNS:
            text = record[name]
            if name in ("env_step", "critic_updates"):
                kw[name] = int(text)
            elif text == "":
                kw[name] = None
            else:
                kw[name] = float(text)
        return cls(**kw)


def write_metrics(path: Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row.csv_fields())


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv(r) for r in csv.DictReader(fh)]


def smooth(series, window: int = 25) -> list[float]:
    """Centered moving average; windows shrink symmetrically at the ends."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    half = (window - 1) // 2
    out = []
    for i in range(n):
        k = min(half, i, n - 1 - i)
        out.append(float(x[i - k:i + k + 1].mean()))
    return out


def evaluate_policy(agent: agents.Agent, env: envs.Env, rng: np.random.Generator, episodes: int = 10) -> float:
    """Mean undiscounted return of the deterministic actor over fresh episodes."""
    state = env.reset(rng, episodes)
    total = np.zeros(episodes)
    for _ in range(env.spec.horizon):
        action = agents.act(agent, env.observe(state), explore=False)
        state, r = env.step(state, action)
        total += r
    return float(total.mean())


def critic_action_gradients(agent: agents.Agent, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """grad_a of the critic the actor follows (min over critics) at given pairs."""
    graph = ad.Graph()
    s = graph.constant(obs)
    a = graph.make_input(actions.shape, actions, requires_grad=True)
    q = None
    for c in agent.critics:
        qi = agents.q_value(c.constant_leaves(graph), c.spec, s, a)
        q = qi if q is None else ad.minimum(q, qi)
    return ad.grad_arrays(ad.sum(q), [a])[0]


def _actor_policy(agent: agents.Agent):
    def policy(graph, obs):
        return agents.policy_graph(agent.actor.constant_leaves(graph), agent.actor.spec, obs)
    return policy


def true_action_gradients(agent: agents.Agent, env: envs.Env, start_obs: np.ndarray, horizon: int,
                          gamma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observations, actions and grad_a G_t along oracle rollouts, each ``[H, n, .]``."""
    roll = envs.rollout_graph(_actor_policy(agent), env, None, horizon, gamma, start_obs=start_obs)
    obs = np.stack([o.data for o in roll.observations])
    acts = np.stack([a.data for a in roll.actions])
    return obs, acts, roll.action_gradients()


def grad_error_eval(agent: agents.Agent, env: envs.Env, rng: np.random.Generator, trajectories: int = 10,
                    horizon: int | None = None, cache: dict | None = None) -> float:
    """L = 1/H sum_t gamma^t ||grad_a G(s_t, a_t) - grad_a Q_hat(s_t, a_t)||_1, averaged over trajectories.

    ``cache`` memoizes the ground truth per (actor parameters, start states),
    which is exact when the actor is fixed.
    """
    horizon = env.spec.horizon if horizon is None else horizon
    gamma = agent.hp.gamma
    start = env.observe(env.reset(rng, trajectories))
    key = None
    if cache is not None:
        h = hashlib.sha256(start.tobytes())
        for k in sorted(agent.actor.params):
            h.update(agent.actor.params[k].tobytes())
        key = (h.hexdigest(), horizon, gamma)
    if key is not None and key in cache:
        obs, acts, true_g = cache[key]
    else:
        obs, acts, true_g = true_action_gradients(agent, env, start, horizon, gamma)
        if key is not None:
            cache[key] = (obs, acts, true_g)
    flat = lambda x: x.reshape(horizon * trajectories, -1)
    q_g = critic_action_gradients(agent, flat(obs), flat(acts)).reshape(true_g.shape)
    per_step = np.abs(true_g - q_g).sum(axis=2)                 # [H, n]
    weights = gamma ** np.arange(horizon, dtype=np.float64)
    per_traj = (weights[:, None] * per_step).sum(axis=0) / horizon
    return float(per_traj.mean())


@dataclass
class Snapshot:
    critic_loss: float
    mean_abs_td: float
    mean_grad_td_norm: float
    mean_grad_q_norm: float


def diagnostics(agent: agents.Agent, states: np.ndarray, rng: np.random.Generator) -> Snapshot:
    """Critic objective, |delta|, ||grad_a delta|| and ||grad_a Q|| on a held-out batch.

    TD-errors use imagined transitions (model or oracle); model-free agents
    are scored against the oracle transition, which is the real one.
    """
    probe = agent
    if not agent.uses_model:
        probe = dataclasses.replace(agent, oracle=True, variant="dyna")
    graph = ad.Graph(rng=rng)
    td = agents.build_td_error(graph, states, probe, rng)
    mage_terms, grad_deltas, _ = agents.mage_losses(td, agent.hp)
    if agent.variant in agents.GRADIENT_CRITIC:
        losses = [l.data for l in mage_terms]
    else:
        losses = [l.data for l in agents.td_losses(td, agent.hp)]
    norm = lambda gs: float(np.mean([np.linalg.norm(g.data, axis=1).mean() for g in gs]))
    actions = td.a.data
    gq = critic_action_gradients(agent, states, actions)
    return Snapshot(float(np.sum(losses)), float(np.mean([np.abs(d.data).mean() for d in td.deltas])),
                    norm(grad_deltas), float(np.linalg.norm(gq, axis=1).mean()))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    status: str = "ok"
    message: str = ""
    rows: int = 0
    final_return: float | None = None
    final_smoothed_return: float | None = None
    max_smoothed_return: float | None = None
    final_grad_error: float | None = None
    critic_updates: int = 0
    actor_updates: int = 0
    model_train_calls: int = 0
    wall_seconds: float = 0.0


def _stream(seed: int, name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, tag])


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path) -> SeedResult:
    t0 = time.perf_counter()
    env = cfg.env_instance()
    hp = cfg.resolved_hp()
    ge = cfg.grad_eval
    agent = agents.make_agent(cfg.variant, env, hp, _stream(seed, "init"), oracle=cfg.oracle_dynamics,
                              learned_reward=cfg.learned_reward, fixed_actor=ge.fixed_actor)
    rngs = agents.Rngs(_stream(seed, "explore"), _stream(seed, "update"), _stream(seed, "model"))
    collector = agents.Collector(env, _stream(seed, "env"))
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(cfg.steps, 1)), env.spec.obs_dim, env.spec.action_dim)
    held_out = env.observe(env.reset(_stream(seed, "heldout"), DIAGNOSTIC_BATCH))
    cache: dict = {}
    rows: list[MetricsRow] = []
    returns: list[float] = []
    path = out_dir / f"metrics_seed{seed}.csv"
    result = SeedResult(seed)
    start_actor = {k: v.copy() for k, v in agent.actor.params.items()}

    def emit(step: int) -> None:
        ret = evaluate_policy(agent, env, _stream(seed, f"eval{step}"), cfg.eval_episodes)
        returns.append(ret)
        grad_err = None
        if ge.enabled:
            grad_err = grad_error_eval(agent, env, _stream(seed, "gradeval"), ge.trajectories, ge.horizon, cache)
        snap = diagnostics(agent, held_out, _stream(seed, f"diag{step}"))
        rows.append(MetricsRow(step, agent.critic_updates, ret, ret, grad_err, snap.critic_loss, snap.mean_abs_td,
                               snap.mean_grad_td_norm, snap.mean_grad_q_norm, time.perf_counter() - t0))
        for row, sm in zip(rows, smooth(returns, cfg.smoothing_window)):
            row.smoothed_return = sm
        for row in rows:
            for name in CSV_COLUMNS[2:]:
                v = getattr(row, name)
                if v is not None and not math.isfinite(v):
                    raise nets.DivergenceError(f"non-finite {name} at step {step}")
        write_metrics(path, rows)

    write_metrics(path, rows)
    try:
        for step in range(1, cfg.steps + 1):
            agents.train_iteration(agent, collector, buffer, rngs)
            if ge.enabled:
                rounds = step - hp.warmup_steps
                due = rounds > 0 and rounds % ge.interval == 0
            else:
                due = step % cfg.eval_interval == 0
            if due or step == cfg.steps:
                emit(step)
    except (nets.DivergenceError, FloatingPointError) as exc:
        result.status = "diverged"
        result.message = str(exc)
    result.rows = len(rows)
    if rows:
        result.final_return = rows[-1].mean_eval_return
        result.final_smoothed_return = rows[-1].smoothed_return
        result.max_smoothed_return = max(r.smoothed_return for r in rows)
        result.final_grad_error = rows[-1].grad_error_L
    result.critic_updates = agent.critic_updates
    result.actor_updates = agent.actor_updates
    result.model_train_calls = agent.model_train_calls
    if ge.fixed_actor and any(not np.array_equal(start_actor[k], agent.actor.params[k]) for k in start_actor):
        raise AssertionError("fixed actor changed during the run")
    if cfg.save_checkpoint:
        nets.save_checkpoint(out_dir / f"checkpoint_seed{seed}.npz", agent.checkpoint_sets())
    result.wall_seconds = time.perf_counter() - t0
    return result


def _run_seed_job(args):
    cfg_dict, seed, out_dir = args
    return run_seed(config_from_dict(cfg_dict), seed, Path(out_dir))


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    ge = GradEvalConfig(**d.pop("grad_eval", {}))
    hp_d = dict(d.pop("hp", {}))
    for k in ("actor_hidden", "critic_hidden", "model_hidden", "reward_hidden"):
        if k in hp_d:
            hp_d[k] = tuple(hp_d[k])
    d["seeds"] = tuple(d.get("seeds", (0,)))
    return ExperimentConfig(**d, grad_eval=ge, hp=agents.Hyperparams(**hp_d))


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run(cfg: ExperimentConfig, workers: int = 1) -> int:
    """Run every seed; returns 0 when all seeds finish, 3 when any diverged."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), seed, str(out)) for seed in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [run_seed(cfg, seed, out) for seed in cfg.seeds]
    manifest = {
        "library": "magelab",
        "version": __version__,
        "config": cfg.to_dict(),
        "csv_columns": list(CSV_COLUMNS),
        "seeds": [{k: v for k, v in asdict(r).items() if k != "wall_seconds"} for r in results],
    }
    _dump_json(out / "run.json", manifest)
    _dump_json(out / "timing.json", {str(r.seed): r.wall_seconds for r in results})
    return 0 if all(r.status == "ok" for r in results) else 3


# ---------------------------------------------------------------------------
# presets and reports
# ---------------------------------------------------------------------------

# Desk scale: narrower nets, smaller batches, one update per env step and a
# larger step size to compensate for the fewer updates.
DESK_HP = {
    "actor_hidden": (64, 64),
    "critic_hidden": (64, 64),
    "model_hidden": (64, 64),
    "batch_size": 128,
    "updates_per_step": 1,
    "lr": 1e-3,
    "model_batch_size": 128,
}


def desk_config(**kw) -> ExperimentConfig:
    hp = agents.Hyperparams(**DESK_HP)
    ge = kw.pop("grad_eval", GradEvalConfig())
    return ExperimentConfig(hp=hp, grad_eval=ge, **kw)


PRESETS = ("fig3_gradient_accuracy", "b1_degenerate", "b4_lambda_sweep", "b2_learned_reward", "main_control")


def preset(name: str, out: str | Path = "runs", seeds: tuple[int, ...] | None = None) -> dict[str, ExperimentConfig]:
    """Arms of a named experiment, keyed by arm name."""
    out = Path(out) / name
    arms: dict[str, ExperimentConfig] = {}
    if name == "fig3_gradient_accuracy":
        seeds = seeds or (0, 1, 2, 3)
        ge = lambda: GradEvalConfig(enabled=True, interval=10, trajectories=10, initial_transitions=200,
                                    fixed_actor=True)
        for variant in ("mage", "dyna"):
            cfg = desk_config(variant=variant, oracle_dynamics=True, steps=200 + 5000, seeds=seeds,
                              grad_eval=ge(), out_dir=str(out / variant))
            # the oracle makes rounds cheap, so use several critic updates per round as in the standard
            # settings; 5 rather than 10 keeps both arms inside the half-hour budget on one CPU
            cfg.hp.updates_per_step = 5
            arms[variant] = cfg
    elif name == "b1_degenerate":
        seeds = seeds or (0, 1, 2, 3)
        cfg = desk_config(variant="mage_ddpg", oracle_dynamics=True, lam=0.0, seeds=seeds,
                          grad_eval=GradEvalConfig(enabled=True, interval=50, initial_transitions=200,
                                                   fixed_actor=True),
                          out_dir=str(out / "mage_ddpg_lam0"))
        # mage_ddpg makes G critic updates per round; 1500 rounds covers the 10k-update window and beyond
        cfg.steps = 200 + 1500
        cfg.hp.updates_per_step = 10
        arms["mage_ddpg_lam0"] = cfg
    elif name == "b4_lambda_sweep":
        seeds = seeds or (0, 1, 2, 3, 4)
        for lam in (0.0, 0.05, 0.2, 1.0):
            arm = f"lam{lam:g}"
            arms[arm] = desk_config(variant="mage", lam=lam, seeds=seeds, out_dir=str(out / arm))
    elif name == "b2_learned_reward":
        seeds = seeds or (0, 1, 2, 3, 4)
        for variant in ("mage", "dyna"):
            for learned in (False, True):
                arm = f"{variant}_{'learned' if learned else 'true'}_reward"
                arms[arm] = desk_config(variant=variant, learned_reward=learned, seeds=seeds, out_dir=str(out / arm))
    elif name == "main_control":
        seeds = seeds or (0, 1, 2, 3, 4)
        for env, steps in (("pendulum", 20000), ("cartpole", 30000)):
            for variant in ("mage", "dyna", "td3", "td3_multi"):
                arm = f"{env}_{variant}"
                arms[arm] = desk_config(env=env, variant=variant, steps=steps, seeds=seeds, out_dir=str(out / arm))
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return arms


def _interval(values: list[float]) -> dict:
    x = np.asarray(values, dtype=np.float64)
    mean = float(x.mean())
    half = float(1.96 * x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return {"mean": mean, "ci95_low": mean - half, "ci95_high": mean + half, "n": len(x), "values": x.tolist()}


def summarize_arm(arm_dir: Path) -> dict:
    files = sorted(arm_dir.glob("metrics_seed*.csv"), key=lambda p: int(p.stem.removeprefix("metrics_seed")))
    finals, best, grads = [], [], []
    for f in files:
        rows = read_metrics(f)
        if not rows:
            continue
        finals.append(rows[-1].smoothed_return)
        best.append(max(r.smoothed_return for r in rows))
        if rows[-1].grad_error_L is not None:
            grads.append(rows[-1].grad_error_L)
    out = {"seeds": len(finals)}
    if finals:
        out["final_smoothed_return"] = _interval(finals)
        out["max_smoothed_return"] = _interval(best)
    if grads:
        out["final_grad_error"] = _interval(grads)
    return out


def report(directory: str | Path) -> dict:
    """Regenerate ``summary.json`` from every arm's CSVs under ``directory``."""
    directory = Path(directory)
    arm_dirs = sorted({p.parent for p in directory.rglob("metrics_seed*.csv")})
    summary = {str(d.relative_to(directory)) or ".": summarize_arm(d) for d in arm_dirs}
    _dump_json(directory / "summary.json", summary)
    return summary


def is_complete(cfg: ExperimentConfig) -> bool:
    """True when ``cfg.out_dir`` holds a finished run of this config (wherever it was written from)."""
    path = Path(cfg.out_dir) / "run.json"
    if not path.exists():
        return False
    stored = dict(json.loads(path.read_text()).get("config", {}))
    wanted = json.loads(json.dumps(cfg.to_dict()))
    stored.pop("out_dir", None)
    wanted.pop("out_dir")
    return stored == wanted


def run_preset(name: str, out: str | Path, seeds: tuple[int, ...] | None = None, workers: int = 1,
               arms: tuple[str, ...] | None = None, resume: bool = False) -> int:
    """Run the arms of a preset (all, or the named subset); ``resume`` skips finished arms."""
    status = 0
    expanded = preset(name, out, seeds)
    unknown = set(arms or ()) - set(expanded)
    if unknown:
        raise ConfigError(f"preset {name!r} has no arms {sorted(unknown)}; choose from {sorted(expanded)}")
    for arm, cfg in expanded.items():
        if arms and arm not in arms:
            continue
        if resume and is_complete(cfg):
            print(f"[{name}] arm {arm}: already complete", flush=True)
            continue
        print(f"[{name}] arm {arm}: {len(cfg.seeds)} seeds -> {cfg.out_dir}", flush=True)
        status = max(status, run(cfg, workers))
    report(Path(out) / name)
    return status


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="magelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", help="flat 'key = value' config file")
    p_run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p_run.add_argument("--workers", type=int, default=1)
    p_pre = sub.add_parser("preset", help="run a named experiment family")
    p_pre.add_argument("name", choices=PRESETS)
    p_pre.add_argument("--out", default="runs")
    p_pre.add_argument("--seeds", help="comma-separated seed list")
    p_pre.add_argument("--workers", type=int, default=1)
    p_pre.add_argument("--arms", help="comma-separated subset of arms")
    p_pre.add_argument("--resume", action="store_true", help="skip arms that already finished")
    p_rep = sub.add_parser("report", help="rebuild summary.json from CSVs")
    p_rep.add_argument("directory")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run(load_config(args.config, args.set), args.workers)
        if args.command == "preset":
            seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
            arms = tuple(a.strip() for a in args.arms.split(",")) if args.arms else None
            return run_preset(args.name, args.out, seeds, args.workers, arms, args.resume)
        print(json.dumps(report(args.directory), indent=2, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
