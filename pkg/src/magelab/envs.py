"""Differentiable toy control tasks: pendulum swing-up and continuous cart-pole.

Each task exposes a black-box ``step`` on its internal state and a graph
``oracle_step_graph`` on observations.  Observations carry the angle as
``(cos, sin)`` so the oracle never has to wrap an angle; the wrapped-angle
penalty is ``atan2(sin, cos) ** 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    obs_dim: int
    action_dim: int
    action_bound: float
    horizon: int
    dt: float
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.action_bound > 0:
            raise ValueError("action_bound must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool = False


def wrap_angle(theta):
    """Map into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


class Env:
    spec: EnvSpec

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def observe(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def reward(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def oracle_step_graph(self, graph: ad.Graph, obs: ad.Value, action: ad.Value):
        raise NotImplementedError

    def reward_graph(self, graph: ad.Graph, obs: ad.Value, action: ad.Value) -> ad.Value:
        raise NotImplementedError

    def _check_finite(self, state):
        if not np.all(np.isfinite(state)):
            raise FloatingPointError(f"{self.spec.name}: non-finite state")


def _col(x: ad.Value, i: int) -> ad.Value:
    return ad.slice_last(x, i, i + 1)


def _rotate(c: ad.Value, s: ad.Value, delta: ad.Value):
    cd, sd = ad.cos(delta), ad.sin(delta)
    return ad.sub(ad.mul(c, cd), ad.mul(s, sd)), ad.add(ad.mul(s, cd), ad.mul(c, sd))


class Pendulum(Env):
    """theta'' = 3g/(2l) sin(theta) + 3/(m l^2) u, theta = 0 upright."""

    def __init__(self, horizon: int = 200):
        self.spec = EnvSpec("pendulum", state_dim=2, obs_dim=3, action_dim=1, action_bound=2.0,
                            horizon=horizon, dt=0.05,
                            constants={"g": 10.0, "m": 1.0, "l": 1.0, "max_speed": 8.0, "max_torque": 2.0})

    def reset(self, rng, n=None):
        size = () if n is None else (n,)
        theta = rng.uniform(-np.pi, np.pi, size=size)
        theta_dot = rng.uniform(-1.0, 1.0, size=size)
        return np.stack([theta, theta_dot], axis=-1)

    def observe(self, state):
        state = np.asarray(state, dtype=np.float64)
        th, thd = state[..., 0], state[..., 1]
        return np.stack([np.cos(th), np.sin(th), thd], axis=-1)

    def _coeffs(self):
        c = self.spec.constants
        return 3.0 * c["g"] / (2.0 * c["l"]), 3.0 / (c["m"] * c["l"] ** 2)

    def step(self, state, action):
        c = self.spec.constants
        state = np.asarray(state, dtype=np.float64)
        th, thd = state[..., 0], state[..., 1]
        u = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -c["max_torque"], c["max_torque"])
        reward = -(wrap_angle(th) ** 2 + 0.1 * thd ** 2 + 0.001 * u ** 2)
        k_grav, k_u = self._coeffs()
        new_thd = np.clip(thd + (k_grav * np.sin(th) + k_u * u) * self.spec.dt, -c["max_speed"], c["max_speed"])
        new_th = th + new_thd * self.spec.dt
        nxt = np.stack([new_th, new_thd], axis=-1)
        self._check_finite(nxt)
        return nxt, reward

    def reward(self, obs, action):
        c = self.spec.constants
        obs = np.asarray(obs, dtype=np.float64)
        u = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -c["max_torque"], c["max_torque"])
        th = np.arctan2(obs[..., 1], obs[..., 0])
        return -(th ** 2 + 0.1 * obs[..., 2] ** 2 + 0.001 * u ** 2)

    def reward_graph(self, graph, obs, action):
        c = self.spec.constants
        u = ad.clip(action, -c["max_torque"], c["max_torque"])
        th = ad.atan2(_col(obs, 1), _col(obs, 0))
        thd = _col(obs, 2)
        cost = ad.add(ad.add(ad.square(th), ad.scalar_mul(ad.square(thd), 0.1)), ad.scalar_mul(ad.square(u), 0.001))
        return ad.reshape(ad.neg(cost), (obs.shape[0],))

    def oracle_step_graph(self, graph, obs, action):
        c = self.spec.constants
        dt = self.spec.dt
        k_grav, k_u = self._coeffs()
        cos_th, sin_th, thd = _col(obs, 0), _col(obs, 1), _col(obs, 2)
        u = ad.clip(action, -c["max_torque"], c["max_torque"])
        acc = ad.add(ad.scalar_mul(sin_th, k_grav), ad.scalar_mul(u, k_u))
        new_thd = ad.clip(ad.add(thd, ad.scalar_mul(acc, dt)), -c["max_speed"], c["max_speed"])
        new_c, new_s = _rotate(cos_th, sin_th, ad.scalar_mul(new_thd, dt))
        nxt = ad.concat([new_c, new_s, new_thd])
        return nxt, self.reward_graph(graph, obs, action)


class CartPole(Env):
    """Cart-pole balance with a continuous force; theta = 0 upright."""

    def __init__(self, horizon: int = 200):
        self.spec = EnvSpec("cartpole", state_dim=4, obs_dim=5, action_dim=1, action_bound=10.0,
                            horizon=horizon, dt=0.02,
                            constants={"g": 9.8, "m_cart": 1.0, "m_pole": 0.1, "half_length": 0.5,
                                       "max_force": 10.0})

    def reset(self, rng, n=None):
        size = (4,) if n is None else (n, 4)
        return rng.uniform(-0.05, 0.05, size=size)

    def observe(self, state):
        state = np.asarray(state, dtype=np.float64)
        x, xd, th, thd = (state[..., i] for i in range(4))
        return np.stack([x, xd, np.cos(th), np.sin(th), thd], axis=-1)

    def _accelerations(self, force, cos_th, sin_th, thd):
        c = self.spec.constants
        total = c["m_cart"] + c["m_pole"]
        pml = c["m_pole"] * c["half_length"]
        temp = (force + pml * thd ** 2 * sin_th) / total
        th_acc = (c["g"] * sin_th - cos_th * temp) / (c["half_length"] * (4.0 / 3.0 - c["m_pole"] * cos_th ** 2 / total))
        x_acc = temp - pml * th_acc * cos_th / total
        return x_acc, th_acc

    def step(self, state, action):
        c = self.spec.constants
        dt = self.spec.dt
        state = np.asarray(state, dtype=np.float64)
        x, xd, th, thd = (state[..., i] for i in range(4))
        force = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -c["max_force"], c["max_force"])
        reward = -(x ** 2 + 10.0 * wrap_angle(th) ** 2 + 0.1 * xd ** 2 + 0.1 * thd ** 2)
        x_acc, th_acc = self._accelerations(force, np.cos(th), np.sin(th), thd)
        nxt = np.stack([x + dt * xd, xd + dt * x_acc, th + dt * thd, thd + dt * th_acc], axis=-1)
        self._check_finite(nxt)
        return nxt, reward

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        th = np.arctan2(obs[..., 3], obs[..., 2])
        return -(obs[..., 0] ** 2 + 10.0 * th ** 2 + 0.1 * obs[..., 1] ** 2 + 0.1 * obs[..., 4] ** 2)

    def reward_graph(self, graph, obs, action):
        th = ad.atan2(_col(obs, 3), _col(obs, 2))
        cost = ad.add(
            ad.add(ad.square(_col(obs, 0)), ad.scalar_mul(ad.square(th), 10.0)),
            ad.add(ad.scalar_mul(ad.square(_col(obs, 1)), 0.1), ad.scalar_mul(ad.square(_col(obs, 4)), 0.1)),
        )
        return ad.reshape(ad.neg(cost), (obs.shape[0],))

    def oracle_step_graph(self, graph, obs, action):
        c = self.spec.constants
        dt = self.spec.dt
        total = c["m_cart"] + c["m_pole"]
        pml = c["m_pole"] * c["half_length"]
        x, xd, cos_th, sin_th, thd = (_col(obs, i) for i in range(5))
        force = ad.clip(action, -c["max_force"], c["max_force"])
        temp = ad.scalar_mul(ad.add(force, ad.scalar_mul(ad.mul(ad.square(thd), sin_th), pml)), 1.0 / total)
        num = ad.sub(ad.scalar_mul(sin_th, c["g"]), ad.mul(cos_th, temp))
        den = ad.scalar_mul(ad.add_scalar(ad.scalar_mul(ad.square(cos_th), -c["m_pole"] / total), 4.0 / 3.0),
                            c["half_length"])
        th_acc = ad.div(num, den)
        x_acc = ad.sub(temp, ad.scalar_mul(ad.mul(th_acc, cos_th), pml / total))
        new_c, new_s = _rotate(cos_th, sin_th, ad.scalar_mul(thd, dt))
        nxt = ad.concat([
            ad.add(x, ad.scalar_mul(xd, dt)),
            ad.add(xd, ad.scalar_mul(x_acc, dt)),
            new_c,
            new_s,
            ad.add(thd, ad.scalar_mul(th_acc, dt)),
        ])
        return nxt, self.reward_graph(graph, obs, action)


ENVS: dict[str, Callable[..., Env]] = {"pendulum": Pendulum, "cartpole": CartPole}


def make_env(name: str, **kwargs) -> Env:
    try:
        return ENVS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


GraphPolicy = Callable[[ad.Graph, ad.Value], ad.Value]


@dataclass
class Rollout:
    graph: ad.Graph
    ret: ad.Value                  # scalar: sum over rows of sum_t gamma^t r_t
    perturbations: list[ad.Value]  # zero leaves added to each a_t
    observations: list[ad.Value]
    actions: list[ad.Value]
    gamma: float

    def action_gradients(self) -> np.ndarray:
        """d G_t / d a_t for every step, shape ``[horizon, batch, action_dim]``.

        ``G_t`` is the truncated return from step ``t`` onward with later
        actions following the policy; the gamma**t scaling of the single
        backward pass is undone here.
        """
        raw = ad.grad_arrays(self.ret, self.perturbations)
        scale = self.gamma ** -np.arange(len(raw), dtype=np.float64)
        return np.stack(raw) * scale[:, None, None]


def rollout_graph(policy: GraphPolicy, env: Env, rng: np.random.Generator, horizon: int, gamma: float,
                  n: int = 1, start_obs: np.ndarray | None = None, graph: ad.Graph | None = None) -> Rollout:
    """Differentiable rollout of a deterministic policy through the oracle dynamics."""
    graph = graph if graph is not None else ad.Graph(rng=rng)
    if start_obs is None:
        start_obs = env.observe(env.reset(rng, n))
    obs = graph.constant(np.asarray(start_obs, dtype=np.float64).reshape(-1, env.spec.obs_dim))
    batch = obs.shape[0]
    total = None
    perts, observations, actions = [], [], []
    for t in range(horizon):
        z = graph.make_input((batch, env.spec.action_dim), np.zeros((batch, env.spec.action_dim)), True)
        a = ad.add(policy(graph, obs), z)
        nxt, r = env.oracle_step_graph(graph, obs, a)
        term = ad.scalar_mul(ad.sum(r), gamma ** t)
        total = term if total is None else ad.add(total, term)
        perts.append(z)
        observations.append(obs)
        actions.append(a)
        obs = nxt
    return Rollout(graph, total, perts, observations, actions, gamma)


def rollout_return(policy: GraphPolicy, env: Env, rng: np.random.Generator, horizon: int, gamma: float,
                   start_obs: np.ndarray | None = None) -> float:
    """Discounted return of one trajectory, built as a graph."""
    roll = rollout_graph(policy, env, rng, horizon, gamma, n=1, start_obs=start_obs)
    return float(roll.graph.eval(roll.ret))


def black_box_return(policy_fn: Callable[[np.ndarray], np.ndarray], env: Env, state: np.ndarray,
                     horizon: int, gamma: float = 1.0) -> np.ndarray:
    """Return of ``policy_fn`` from (a batch of) internal states via ``step``."""
    state = np.asarray(state, dtype=np.float64)
    total = np.zeros(state.shape[:-1])
    for t in range(horizon):
        a = policy_fn(env.observe(state))
        state, r = env.step(state, a)
        total = total + (gamma ** t) * r
    return total
