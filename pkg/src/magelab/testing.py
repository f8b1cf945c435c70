"""Gradient-check corpora shared by the test suite and the acceptance script."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import agents
from . import autodiff as ad
from . import dynamics, envs

# Unary builders keep every primitive inside its smooth domain.
_UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "swish": ad.swish,
    "exp": lambda x: ad.exp(ad.tanh(x)),
    "log": lambda x: ad.log(ad.add_scalar(ad.square(x), 0.5)),
    "square": ad.square,
    "sqrt": lambda x: ad.sqrt(ad.add_scalar(ad.square(x), 0.25)),
    "abs": ad.absolute,
    "huber": ad.huber,
    "clip": lambda x: ad.clip(x, -0.8, 0.8),
    "scalar_mul": lambda x: ad.scalar_mul(x, 0.7),
    "neg": ad.neg,
}
_BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "min": ad.minimum,
    "div": lambda a, b: ad.div(a, ad.add_scalar(ad.square(b), 1.0)),
}
_REDUCE = {
    "sum": ad.sum,
    "mean": ad.mean,
    "l1_norm": ad.l1_norm,
    "l2_norm_smoothed": ad.l2_norm_smoothed,
}
ALL_KINDS = tuple(_UNARY) + tuple(_BINARY) + tuple(_REDUCE) + ("matmul", "gaussian_reparam")


@dataclass
class RandomGraph:
    builder: object
    point: list[np.ndarray]
    kinds: list[str]


def random_graph(rng: np.random.Generator, depth: int | None = None, width: int = 3) -> RandomGraph:
    """A random composite scalar function of two vectors and a matrix.

    The op sequence is drawn once, so the builder is a fixed function that
    finite differences can probe.  Points avoid the kinks of abs, huber,
    clip and min except with negligible probability.
    """
    depth = int(rng.integers(2, 7)) if depth is None else depth
    point = [rng.normal(0, 0.8, size=width), rng.normal(0, 0.8, size=width),
             rng.normal(0, 0.5, size=(width, width))]
    plan = []
    kinds = []
    for _ in range(depth):
        family = rng.choice(["unary", "binary", "matmul", "reparam"], p=[0.45, 0.35, 0.1, 0.1])
        if family == "unary":
            kind = str(rng.choice(list(_UNARY)))
        elif family == "binary":
            kind = str(rng.choice(list(_BINARY)))
        elif family == "matmul":
            kind = "matmul"
        else:
            kind = "gaussian_reparam"
        plan.append((kind, int(rng.integers(0, 1 << 30)), int(rng.integers(0, 1 << 30))))
        kinds.append(kind)
    reducer = str(rng.choice(list(_REDUCE)))
    kinds.append(reducer)
    noise = rng.normal(size=width)

    def builder(graph, leaves):
        x, y, w = leaves
        pool = [x, y]
        for kind, i, j in plan:
            a, b = pool[i % len(pool)], pool[j % len(pool)]
            if kind in _UNARY:
                out = _UNARY[kind](a)
            elif kind in _BINARY:
                out = _BINARY[kind](a, b)
            elif kind == "matmul":
                out = ad.matmul(w, a)
            else:
                out = ad.gaussian_reparam(a, ad.scalar_mul(ad.tanh(b), 0.5), graph.constant(noise))
            pool.append(out)
        # mix the last node with a leaf so the output depends on every leaf
        last = ad.add(pool[-1], ad.matmul(w, ad.scalar_mul(x, 0.3)))
        return _REDUCE[reducer](ad.add(last, ad.scalar_mul(y, 0.2)))

    return RandomGraph(builder, point, kinds)


# ---------------------------------------------------------------------------
# TD-error action-gradient instances
# ---------------------------------------------------------------------------

@dataclass
class TDInstance:
    agent: agents.Agent
    states: np.ndarray
    actions: np.ndarray
    frozen: agents.FrozenNoise


def td_instance(rng: np.random.Generator, batch: int = 3, env_name: str = "pendulum") -> TDInstance:
    """Small random nets, a random ensemble with non-trivial input statistics, frozen noises."""
    env = envs.make_env(env_name)
    hp = agents.Hyperparams(actor_hidden=(8,), critic_hidden=(8, 8), model_hidden=(8,), ensemble_size=2,
                            gamma=float(rng.uniform(0.5, 0.99)))
    agent = agents.make_agent("mage", env, hp, rng)
    for c in agent.critics:
        # targets differ from the online critics
        c.target = {k: v + rng.normal(0, 0.1, size=v.shape) for k, v in c.target.items()}
    d = env.spec.obs_dim + env.spec.action_dim
    agent.model.in_mean = rng.normal(0, 0.3, size=d)
    agent.model.in_std = rng.uniform(0.5, 2.0, size=d)
    states = env.observe(env.reset(rng, batch))
    bound = env.spec.action_bound
    actions = rng.uniform(-0.8 * bound, 0.8 * bound, size=(batch, env.spec.action_dim))
    frozen = agents.FrozenNoise(model=rng.standard_normal((batch, env.spec.obs_dim)),
                                target=np.clip(rng.normal(0, 0.2, size=(batch, env.spec.action_dim)), -0.5, 0.5),
                                member=int(rng.integers(agent.model.size)))
    return TDInstance(agent, states, actions, frozen)


def td_builder(inst: TDInstance, critic: int = 0):
    def build(graph, leaves):
        td = agents.build_td_error(graph, inst.states, inst.agent, None, frozen=inst.frozen, actions=leaves[0])
        return ad.sum(td.deltas[critic])
    return build


def autodiff_td_gradient(inst: TDInstance, critic: int = 0) -> np.ndarray:
    graph = ad.Graph()
    a = graph.make_input(inst.actions.shape, inst.actions, requires_grad=True)
    return ad.grad_arrays(td_builder(inst, critic)(graph, [a]), [a])[0]


def finite_difference_td_gradient(inst: TDInstance, critic: int = 0, eps: float = 1e-6) -> np.ndarray:
    return ad.numeric_gradient(td_builder(inst, critic), [inst.actions], eps)[0]


def _jacobian(out: ad.Value, wrt: ad.Value) -> np.ndarray:
    """Per-sample Jacobian ``[batch, out_dim, in_dim]`` of a row-independent map."""
    rows = []
    for k in range(out.shape[1]):
        rows.append(ad.grad_arrays(ad.sum(ad.slice_last(out, k, k + 1)), [wrt])[0])
    return np.stack(rows, axis=1)


def chain_td_gradient(inst: TDInstance, critic: int = 0) -> np.ndarray:
    """dr/da + gamma * (ds'/da)^T (dQbar/ds' + (dpibar/ds')^T dQbar/da') - dQ/da, term by term."""
    agent, s_np, a_np, fz = inst.agent, inst.states, inst.actions, inst.frozen
    hp, bound = agent.hp, agent.spec.action_bound

    g = ad.Graph()
    a = g.make_input(a_np.shape, a_np, requires_grad=True)
    dr = ad.grad_arrays(ad.sum(agents.reward_graph(g, agent, g.constant(s_np), a)), [a])[0]

    g = ad.Graph()
    a = g.make_input(a_np.shape, a_np, requires_grad=True)
    s_hat = dynamics.sample_reparam(g, agent.model, fz.member, g.constant(s_np), a, noise=fz.model)
    jac_model = _jacobian(s_hat, a)                               # [B, obs, act]
    s_hat_np = s_hat.data

    g = ad.Graph()
    sp = g.make_input(s_hat_np.shape, s_hat_np, requires_grad=True)
    pi_bar = agents.policy_graph(agent.actor.target_leaves(g), agent.actor.spec, sp)
    jac_pi = _jacobian(pi_bar, sp)                                # [B, act, obs]
    raw_target = pi_bar.data + fz.target
    a_next = np.clip(raw_target, -bound, bound)
    jac_pi = jac_pi * ((raw_target >= -bound) & (raw_target <= bound))[:, :, None]

    q_vals, dq_ds, dq_da = [], [], []
    for c in agent.critics:
        g = ad.Graph()
        sp = g.make_input(s_hat_np.shape, s_hat_np, requires_grad=True)
        an = g.make_input(a_next.shape, a_next, requires_grad=True)
        q = agents.q_value(c.target_leaves(g), c.spec, sp, an)
        gs, ga = ad.grad_arrays(ad.sum(q), [sp, an])
        q_vals.append(q.data)
        dq_ds.append(gs)
        dq_da.append(ga)
    # the min picks the first critic on ties
    first = (q_vals[0] <= q_vals[1])[:, None] if len(q_vals) > 1 else np.ones((len(s_np), 1), bool)
    dqs = np.where(first, dq_ds[0], dq_ds[-1])
    dqa = np.where(first, dq_da[0], dq_da[-1])
    d_next = dqs + np.einsum("bko,bk->bo", jac_pi, dqa)          # total dQbar/ds'
    through_model = np.einsum("boa,bo->ba", jac_model, d_next)

    g = ad.Graph()
    a = g.make_input(a_np.shape, a_np, requires_grad=True)
    c = agent.critics[critic]
    dq = ad.grad_arrays(ad.sum(agents.q_value(c.constant_leaves(g), c.spec, g.constant(s_np), a)), [a])[0]
    return dr + hp.gamma * through_model - dq


def relative_error(x: np.ndarray, reference: np.ndarray) -> float:
    return float((np.abs(x - reference) / np.maximum(1.0, np.abs(reference))).max())
