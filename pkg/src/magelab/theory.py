"""Exact policy-gradient error bound on an enumerable two-step MDP.

States are time-augmented: ``(t, s)`` with ``t in {0, 1}``, deterministic
dynamics ``s' = s + a`` and reward ``r = -s^2 - a^2``.  The policy is linear,
``pi(s) = theta_0 * s + theta_1``, so its Jacobian norm at ``s`` is
``||(s, 1)||_2``.  With finitely many start states every expectation is a
finite weighted sum, and the discounted state distribution is exact:
``1/(1 - gamma) * E_{d}[f] = sum_t gamma^t E[f(s_t)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

HORIZON = 2


@dataclass(frozen=True)
class ToyMDP:
    gamma: float = 0.9
    starts: tuple[float, ...] = (-1.0, 0.5, 2.0)
    probs: tuple[float, ...] = (0.3, 0.5, 0.2)

    def __post_init__(self):
        if len(self.starts) != len(self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError("start probabilities must match the start states and sum to one")


def policy(theta: np.ndarray, s):
    return theta[0] * s + theta[1]


def visited(mdp: ToyMDP, theta: np.ndarray) -> list[tuple[int, float, float]]:
    """``(t, s_t, gamma^t * P(s_0))`` for every reachable time-augmented state."""
    out = []
    for s0, p in zip(mdp.starts, mdp.probs):
        s = s0
        for t in range(HORIZON):
            out.append((t, s, mdp.gamma ** t * p))
            s = s + policy(theta, s)
    return out


def true_action_grad(mdp: ToyMDP, theta: np.ndarray, t: int, s: float, a: float) -> float:
    """d/da Q^pi_t(s, a) in closed form."""
    if t == HORIZON - 1:
        return -2.0 * a
    s1 = s + a
    # Q_0 = r(s, a) + gamma * V_1(s + a),  V_1(x) = -x^2 - pi(x)^2
    return -2.0 * a + mdp.gamma * (-2.0 * s1 - 2.0 * policy(theta, s1) * theta[0])


def objective_graph(mdp: ToyMDP, graph: ad.Graph, theta: ad.Value) -> ad.Value:
    """J(theta) = E[r_0 + gamma * r_1] as a graph in ``theta``."""
    total = None
    for s0, p in zip(mdp.starts, mdp.probs):
        s = graph.constant(np.array([s0]))
        ret = None
        for t in range(HORIZON):
            a = ad.add(ad.mul(ad.slice_last(theta, 0, 1), s), ad.slice_last(theta, 1, 2))
            r = ad.neg(ad.add(ad.square(s), ad.square(a)))
            r = ad.scalar_mul(r, mdp.gamma ** t)
            ret = r if ret is None else ad.add(ret, r)
            s = ad.add(s, a)
        term = ad.scalar_mul(ret, p)
        total = term if total is None else ad.add(total, term)
    return ad.sum(total)


def autodiff_policy_gradient(mdp: ToyMDP, theta: np.ndarray) -> np.ndarray:
    graph = ad.Graph()
    th = graph.make_input((2,), theta, requires_grad=True)
    return ad.grad_arrays(objective_graph(mdp, graph, th), [th])[0]


def dpg(mdp: ToyMDP, theta: np.ndarray, action_grad) -> np.ndarray:
    """sum_t gamma^t E[grad_theta pi(s_t) * action_grad(t, s_t, pi(s_t))]."""
    out = np.zeros(2)
    for t, s, w in visited(mdp, theta):
        out += w * np.array([s, 1.0]) * action_grad(t, s, policy(theta, s))
    return out


@dataclass
class PolyCritic:
    """Q_hat_t(s, a) = sum_{i+j<=3} c[t, i, j] s^i a^j."""
    coeffs: np.ndarray   # [HORIZON, 4, 4]

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0) -> "PolyCritic":
        c = rng.normal(0.0, scale, size=(HORIZON, 4, 4))
        i, j = np.indices((4, 4))
        c[:, i + j > 3] = 0.0
        return cls(c)

    def value_graph(self, graph: ad.Graph, t: int, s: float, a: ad.Value) -> ad.Value:
        total = None
        for i in range(4):
            for j in range(4 - i):
                c = self.coeffs[t, i, j] * s ** i
                if c == 0.0:
                    continue
                term = graph.constant(np.array([c]))
                for _ in range(j):
                    term = ad.mul(term, a)
                total = term if total is None else ad.add(total, term)
        return total if total is not None else ad.scalar_mul(a, 0.0)

    def action_grad(self, t: int, s: float, a: float) -> float:
        graph = ad.Graph()
        av = graph.make_input((1,), np.array([a]), requires_grad=True)
        return float(ad.grad_arrays(ad.sum(self.value_graph(graph, t, s, av)), [av])[0][0])


@dataclass
class BoundCheck:
    gradient_error: float   # ||grad J - grad_hat J||_2
    bound: float            # L_pi / (1 - gamma) * E_d ||grad_a delta||
    lipschitz: float

    @property
    def holds(self) -> bool:
        return self.gradient_error <= self.bound * (1.0 + 1e-12) + 1e-15


def check_bound(mdp: ToyMDP, theta: np.ndarray, critic: PolyCritic) -> BoundCheck:
    true_grad = dpg(mdp, theta, lambda t, s, a: true_action_grad(mdp, theta, t, s, a))
    approx_grad = dpg(mdp, theta, critic.action_grad)
    states = visited(mdp, theta)
    lip = max(float(np.hypot(s, 1.0)) for _, s, _ in states)
    expected = sum(w * abs(true_action_grad(mdp, theta, t, s, policy(theta, s))
                           - critic.action_grad(t, s, policy(theta, s))) for t, s, w in states)
    return BoundCheck(float(np.linalg.norm(true_grad - approx_grad)), float(lip * expected), lip)
