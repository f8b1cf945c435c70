"""MAGE-TD3 and its baselines (Dyna-TD3, TD3, multi-update TD3, MAGE-DDPG).

Critic learning in MAGE minimizes, per imagined transition,

    || d delta / d a ||  +  lam * huber(delta),   a = pi(s),

where ``delta = r(s, a) + gamma * min_i Qbar_i(s_hat, pi_bar(s_hat) + eps) - Q_i(s, a)``
and ``s_hat`` is drawn from the dynamics model (or the oracle) with the
reparameterization trick, so the action-gradient includes the path through
the dynamics.  The outer gradient with respect to the critic parameters is
a double backpropagation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics, nets
from .envs import Env, EnvSpec, Transition
from .replay import ReplayBuffer

VARIANTS = ("mage", "dyna", "td3", "td3_multi", "mage_ddpg")
MODEL_BASED = frozenset({"mage", "dyna", "mage_ddpg"})
GRADIENT_CRITIC = frozenset({"mage", "mage_ddpg"})


class ConfigError(ValueError):
    pass


@dataclass
class Hyperparams:
    lam: float = 0.2
    gamma: float = 0.99
    exploration_noise: float = 0.1   # std as a fraction of the action bound
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    policy_delay: int = 2
    polyak: float = 0.005            # weight on the online parameters
    lr: float = 1e-4
    updates_per_step: int = 10
    batch_size: int = 512
    warmup_steps: int = 100
    norm: str = "l2"                 # norm of the TD action-gradient: "l2" or "l1"
    td_penalty: str = "huber"        # "huber" or "abs"
    model_train_interval: int = 25
    model_batches: int = 120
    model_batch_size: int = 256
    model_weight_decay: float = 1e-4
    ensemble_size: int = 8
    actor_hidden: tuple[int, ...] = (128, 128)
    critic_hidden: tuple[int, ...] = (384, 384)
    model_hidden: tuple[int, ...] = (128, 128)
    reward_hidden: tuple[int, ...] = (128,)
    activation: str = "swish"

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.policy_delay < 1 or self.updates_per_step < 1:
            raise ConfigError("policy_delay and updates_per_step must be >= 1")
        if self.norm not in ("l2", "l1"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.td_penalty not in ("huber", "abs"):
            raise ConfigError(f"unknown td_penalty {self.td_penalty!r}")
        if not 0.0 <= self.polyak <= 1.0:
            raise ConfigError("polyak mix must lie in [0, 1]")
        for name in ("batch_size", "model_batch_size", "model_batches", "model_train_interval", "ensemble_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass
class RewardModel:
    params: nets.ParamSet
    in_mean: np.ndarray
    in_std: np.ndarray


@dataclass
class Agent:
    variant: str
    env: Env
    hp: Hyperparams
    actor: nets.ParamSet
    critics: list[nets.ParamSet]
    model: dynamics.EnsembleModel | None = None
    reward_model: RewardModel | None = None
    oracle: bool = False
    fixed_actor: bool = False
    env_steps: int = 0
    critic_updates: int = 0
    actor_updates: int = 0
    model_train_calls: int = 0

    @property
    def spec(self) -> EnvSpec:
        return self.env.spec

    @property
    def learned_reward(self) -> bool:
        return self.reward_model is not None

    @property
    def uses_model(self) -> bool:
        return self.variant in MODEL_BASED

    @property
    def target_smoothing(self) -> bool:
        return self.variant != "mage_ddpg"

    @property
    def policy_delay(self) -> int:
        return 1 if self.variant == "mage_ddpg" else self.hp.policy_delay

    @property
    def updates_per_step(self) -> int:
        return 1 if self.variant == "td3" else self.hp.updates_per_step

    def checkpoint_sets(self) -> dict[str, nets.ParamSet]:
        sets = {"actor": self.actor}
        sets.update({f"critic{i}": c for i, c in enumerate(self.critics)})
        if self.model is not None:
            sets.update({f"model{i}": m for i, m in enumerate(self.model.members)})
        if self.reward_model is not None:
            sets["reward"] = self.reward_model.params
        return sets


def make_agent(variant: str, env: Env, hp: Hyperparams, rng: np.random.Generator, *, oracle: bool = False,
               learned_reward: bool = False, fixed_actor: bool = False) -> Agent:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    hp.validate()
    if oracle and variant not in MODEL_BASED:
        raise ConfigError(f"oracle dynamics needs a model-based variant, not {variant!r}")
    if learned_reward and variant not in MODEL_BASED:
        raise ConfigError(f"a learned reward only applies to model-based variants, not {variant!r}")
    spec = env.spec
    actor_spec = nets.MlpSpec(spec.obs_dim, hp.actor_hidden, spec.action_dim, hp.activation,
                              ("tanh_scaled", spec.action_bound))
    critic_spec = nets.MlpSpec(spec.obs_dim + spec.action_dim, hp.critic_hidden, 1, hp.activation)
    actor = nets.init(actor_spec, rng).with_target()
    n_critics = 1 if variant == "mage_ddpg" else 2
    critics = [nets.init(critic_spec, rng).with_target() for _ in range(n_critics)]
    model = None
    if variant in MODEL_BASED and not oracle:
        model = dynamics.make_ensemble(spec.obs_dim, spec.action_dim, rng, hp.ensemble_size, hp.model_hidden,
                                       hp.activation, hp.lr, hp.model_weight_decay)
    reward_model = None
    if learned_reward:
        rspec = nets.MlpSpec(spec.obs_dim + spec.action_dim, hp.reward_hidden, 1, hp.activation)
        d = spec.obs_dim + spec.action_dim
        reward_model = RewardModel(nets.init(rspec, rng), np.zeros(d), np.ones(d))
    return Agent(variant, env, hp, actor, critics, model, reward_model, oracle, fixed_actor)


# ---------------------------------------------------------------------------
# graph pieces
# ---------------------------------------------------------------------------

def q_value(params: dict[str, ad.Value], spec: nets.MlpSpec, s: ad.Value, a: ad.Value) -> ad.Value:
    out = nets.forward(params, spec, ad.concat([s, a]))
    return ad.reshape(out, (s.shape[0],))


def policy_graph(params: dict[str, ad.Value], spec: nets.MlpSpec, s: ad.Value) -> ad.Value:
    return nets.forward(params, spec, s)


def reward_model_graph(graph: ad.Graph, rm: RewardModel, s: ad.Value, a: ad.Value) -> ad.Value:
    x = ad.concat([s, a])
    x = ad.bias_add(ad.matmul(x, graph.constant(np.diag(1.0 / rm.in_std))), graph.constant(-rm.in_mean / rm.in_std))
    out = nets.forward(rm.params.constant_leaves(graph), rm.params.spec, x)
    return ad.reshape(out, (s.shape[0],))


def reward_graph(graph: ad.Graph, agent: Agent, s: ad.Value, a: ad.Value) -> ad.Value:
    if agent.reward_model is not None:
        return reward_model_graph(graph, agent.reward_model, s, a)
    return agent.env.reward_graph(graph, s, a)


@dataclass
class TDTerms:
    graph: ad.Graph
    s: ad.Value
    a: ad.Value
    s_hat: ad.Value
    reward: ad.Value
    target: ad.Value                 # y_hat, shape [B]
    q: list[ad.Value]                # online critics at (s, a), shape [B]
    deltas: list[ad.Value]           # y_hat - q_i
    critic_params: list[dict[str, ad.Value]]
    member: int | None = None


@dataclass
class FrozenNoise:
    """Fixes every random draw of :func:`build_td_error` (for gradient checks)."""
    model: np.ndarray | None = None
    target: np.ndarray | None = None
    member: int = 0


def target_action(graph: ad.Graph, agent: Agent, s_next: ad.Value, rng: np.random.Generator,
                  noise: np.ndarray | None = None) -> ad.Value:
    a_next = policy_graph(agent.actor.target_leaves(graph), agent.actor.spec, s_next)
    if not agent.target_smoothing:
        return a_next
    hp = agent.hp
    if noise is None:
        noise = np.clip(rng.normal(0.0, hp.target_noise, size=a_next.shape), -hp.target_noise_clip,
                        hp.target_noise_clip)
    bound = agent.spec.action_bound
    return ad.clip(ad.add(a_next, graph.constant(noise)), -bound, bound)


def bootstrap(graph: ad.Graph, agent: Agent, s_next: ad.Value, a_next: ad.Value) -> ad.Value:
    qs = [q_value(c.target_leaves(graph), c.spec, s_next, a_next) for c in agent.critics]
    out = qs[0]
    for q in qs[1:]:
        out = ad.minimum(out, q)
    return out


def build_td_error(graph: ad.Graph, s_batch: np.ndarray, agent: Agent, rng: np.random.Generator,
                   frozen: FrozenNoise | None = None, actions: np.ndarray | ad.Value | None = None) -> TDTerms:
    """TD-errors of every online critic on imagined transitions from ``s_batch``.

    ``a = pi(s)`` is a graph node (no exploration noise) and ``y_hat`` stays
    differentiable in ``a`` through the reward, the sampled next state and the
    target critics' action input.  Target and model parameters are constants.
    ``actions`` replaces ``pi(s)`` by given values or an existing leaf.
    """
    s = graph.constant(s_batch)
    if actions is None:
        a = policy_graph(agent.actor.constant_leaves(graph), agent.actor.spec, s)
    elif isinstance(actions, ad.Value):
        a = actions
    else:
        a = graph.make_input(actions.shape, actions, requires_grad=True)
    member = None
    if agent.oracle:
        s_hat, _ = agent.env.oracle_step_graph(graph, s, a)
    else:
        if frozen is not None:
            member = frozen.member
            s_hat = dynamics.sample_reparam(graph, agent.model, member, s, a, noise=frozen.model)
        else:
            member = dynamics.choose_member(agent.model, rng)
            s_hat = dynamics.sample_reparam(graph, agent.model, member, s, a, rng)
    r = reward_graph(graph, agent, s, a)
    a_next = target_action(graph, agent, s_hat, rng, None if frozen is None else frozen.target)
    y = ad.add(r, ad.scalar_mul(bootstrap(graph, agent, s_hat, a_next), agent.hp.gamma))
    params = [c.leaves(graph) for c in agent.critics]
    qs = [q_value(p, c.spec, s, a) for p, c in zip(params, agent.critics)]
    deltas = [ad.sub(y, q) for q in qs]
    return TDTerms(graph, s, a, s_hat, r, y, qs, deltas, params, member)


def _per_sample_norm(x: ad.Value, kind: str) -> ad.Value:
    return ad.l1_norm(x, axis=1) if kind == "l1" else ad.l2_norm_smoothed(x, axis=1)


def _penalty(x: ad.Value, kind: str) -> ad.Value:
    return ad.huber(x) if kind == "huber" else ad.absolute(x)


@dataclass
class CriticStats:
    loss: float
    mean_abs_td: float
    mean_grad_td_norm: float = float("nan")
    mean_grad_q_norm: float = float("nan")


def mage_losses(td: TDTerms, hp: Hyperparams, split_target: bool = True) -> tuple[list[ad.Value], list[ad.Value], list[ad.Value]]:
    """Per-critic MAGE losses plus the action-gradients of delta and Q.

    With ``split_target`` the action-gradient of ``y_hat`` is taken once as
    a constant: it does not depend on the online critic parameters, so
    ``grad_a delta_i = const - grad_a Q_i`` has the same value and the same
    parameter gradient as differentiating ``delta_i`` directly.
    """
    graph = td.graph
    losses, grad_deltas, grad_qs = [], [], []
    gy = graph.constant(ad.grad_arrays(ad.sum(td.target), [td.a])[0]) if split_target else None
    for q, delta in zip(td.q, td.deltas):
        if split_target:
            gq = ad.grad(ad.sum(q), [td.a], create_graph=True)[0]
            gd = ad.sub(gy, gq)
        else:
            gd = ad.grad(ad.sum(delta), [td.a], create_graph=True)[0]
            gq = None
        norm_term = ad.mean(_per_sample_norm(gd, hp.norm))
        loss = norm_term
        if hp.lam:
            loss = ad.add(norm_term, ad.scalar_mul(ad.mean(_penalty(delta, hp.td_penalty)), hp.lam))
        losses.append(loss)
        grad_deltas.append(gd)
        grad_qs.append(gq)
    return losses, grad_deltas, grad_qs


def td_losses(td: TDTerms, hp: Hyperparams) -> list[ad.Value]:
    return [ad.mean(_penalty(delta, hp.td_penalty)) for delta in td.deltas]


def _apply_critic_update(agent: Agent, td: TDTerms, losses: list[ad.Value]) -> float:
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    value = float(total.data)
    if not np.isfinite(value):
        raise nets.DivergenceError(
            f"critic loss is non-finite at update {agent.critic_updates} (lambda={agent.hp.lam})")
    flat = [v for p in td.critic_params for v in p.values()]
    grads = ad.grad_arrays(total, flat)
    k = 0
    for critic, params in zip(agent.critics, td.critic_params):
        names = list(params)
        nets.radam_step(critic, dict(zip(names, grads[k:k + len(names)])), lr=agent.hp.lr)
        k += len(names)
        nets.polyak_update(critic.target, critic.params, agent.hp.polyak)
    agent.critic_updates += 1
    return value


def mage_critic_step(agent: Agent, s_batch: np.ndarray, rng: np.random.Generator) -> CriticStats:
    graph = ad.Graph(rng=rng)
    td = build_td_error(graph, s_batch, agent, rng)
    losses, gds, gqs = mage_losses(td, agent.hp)
    abs_td = float(np.mean([np.abs(d.data).mean() for d in td.deltas]))
    gd_norm = float(np.mean([np.linalg.norm(g.data, axis=1).mean() for g in gds]))
    gq_norm = float(np.mean([np.linalg.norm(g.data, axis=1).mean() for g in gqs]))
    value = _apply_critic_update(agent, td, losses)
    return CriticStats(value, abs_td, gd_norm, gq_norm)


def dyna_critic_step(agent: Agent, s_batch: np.ndarray, rng: np.random.Generator) -> CriticStats:
    graph = ad.Graph(rng=rng)
    td = build_td_error(graph, s_batch, agent, rng)
    abs_td = float(np.mean([np.abs(d.data).mean() for d in td.deltas]))
    value = _apply_critic_update(agent, td, td_losses(td, agent.hp))
    return CriticStats(value, abs_td)


def real_td_terms(graph: ad.Graph, agent: Agent, batch: dict[str, np.ndarray], rng: np.random.Generator) -> TDTerms:
    """TD-errors on stored transitions (model-free TD3)."""
    s = graph.constant(batch["s"])
    a = graph.constant(batch["a"])
    s_next = graph.constant(batch["s_next"])
    r = graph.constant(batch["r"])
    a_next = target_action(graph, agent, s_next, rng)
    y = ad.add(r, ad.scalar_mul(bootstrap(graph, agent, s_next, a_next), agent.hp.gamma))
    params = [c.leaves(graph) for c in agent.critics]
    qs = [q_value(p, c.spec, s, a) for p, c in zip(params, agent.critics)]
    return TDTerms(graph, s, a, s_next, r, y, qs, [ad.sub(y, q) for q in qs], params)


def td3_critic_step(agent: Agent, batch: dict[str, np.ndarray], rng: np.random.Generator) -> CriticStats:
    graph = ad.Graph(rng=rng)
    td = real_td_terms(graph, agent, batch, rng)
    abs_td = float(np.mean([np.abs(d.data).mean() for d in td.deltas]))
    value = _apply_critic_update(agent, td, td_losses(td, agent.hp))
    return CriticStats(value, abs_td)


def actor_objective(graph: ad.Graph, agent: Agent, s_batch: np.ndarray):
    params = agent.actor.leaves(graph)
    s = graph.constant(s_batch)
    a = policy_graph(params, agent.actor.spec, s)
    qs = [q_value(c.constant_leaves(graph), c.spec, s, a) for c in agent.critics]
    q = qs[0]
    for extra in qs[1:]:
        q = ad.minimum(q, extra)
    return ad.mean(q), params


def actor_step(agent: Agent, s_batch: np.ndarray) -> float:
    """Ascend mean_s min_i Q_i(s, pi(s)) on real states, then move the target actor."""
    graph = ad.Graph()
    objective, params = actor_objective(graph, agent, s_batch)
    names = list(params)
    grads = ad.grad_arrays(objective, [params[k] for k in names])
    nets.radam_step(agent.actor, {k: -g for k, g in zip(names, grads)}, lr=agent.hp.lr)
    nets.polyak_update(agent.actor.target, agent.actor.params, agent.hp.polyak)
    agent.actor_updates += 1
    return float(objective.data)


# ---------------------------------------------------------------------------
# learned reward and model fitting
# ---------------------------------------------------------------------------

def learned_reward_step(agent: Agent, batch: dict[str, np.ndarray]) -> float:
    """One MSE step of the reward network on real transitions."""
    rm = agent.reward_model
    if rm is None:
        raise ConfigError("agent has no learned reward")
    graph = ad.Graph()
    params = rm.params.leaves(graph)
    s, a = graph.constant(batch["s"]), graph.constant(batch["a"])
    x = ad.concat([s, a])
    x = ad.bias_add(ad.matmul(x, graph.constant(np.diag(1.0 / rm.in_std))), graph.constant(-rm.in_mean / rm.in_std))
    pred = ad.reshape(nets.forward(params, rm.params.spec, x), (s.shape[0],))
    loss = ad.mean(ad.square(ad.sub(pred, graph.constant(batch["r"]))))
    names = list(params)
    grads = ad.grad_arrays(loss, [params[k] for k in names])
    nets.radam_step(rm.params, dict(zip(names, grads)), lr=agent.hp.lr)
    return float(loss.data)


def fit_models(agent: Agent, buffer: ReplayBuffer, rng: np.random.Generator) -> float:
    data = buffer.ordered()
    loss = float("nan")
    if agent.model is not None:
        loss = dynamics.train(agent.model, data["s"], data["a"], data["s_next"], rng,
                              agent.hp.model_batches, agent.hp.model_batch_size)
    if agent.reward_model is not None:
        inputs = np.concatenate([data["s"], data["a"]], axis=1)
        agent.reward_model.in_mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        agent.reward_model.in_std = np.where(std < 1e-6, 1.0, std)
        for _ in range(agent.hp.model_batches):
            learned_reward_step(agent, buffer.sample_arrays(agent.hp.model_batch_size, rng))
    agent.model_train_calls += 1
    return loss


# ---------------------------------------------------------------------------
# acting and the training loop
# ---------------------------------------------------------------------------

def act(agent: Agent, obs: np.ndarray, explore: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    bound = agent.spec.action_bound
    if explore and agent.env_steps < agent.hp.warmup_steps:
        shape = np.shape(obs)[:-1] + (agent.spec.action_dim,)
        return rng.uniform(-bound, bound, size=shape)
    a = nets.forward_array(agent.actor.params, agent.actor.spec, obs)
    if explore:
        a = a + rng.normal(0.0, agent.hp.exploration_noise * bound, size=a.shape)
    return np.clip(a, -bound, bound)


@dataclass
class Collector:
    """Environment state carried between training iterations."""
    env: Env
    rng: np.random.Generator
    state: np.ndarray | None = None
    t: int = 0
    episodes: int = 0

    def observation(self) -> np.ndarray:
        if self.state is None:
            self.state = self.env.reset(self.rng)
            self.t = 0
        return self.env.observe(self.state)

    def advance(self, action: np.ndarray) -> Transition:
        obs = self.observation()
        nxt, r = self.env.step(self.state, action)
        transition = Transition(obs, np.asarray(action, dtype=np.float64), float(r), self.env.observe(nxt), False)
        self.state = nxt
        self.t += 1
        if self.t >= self.env.spec.horizon:
            self.state = None
            self.episodes += 1
        return transition


@dataclass
class Rngs:
    """Independent random streams of one run."""
    explore: np.random.Generator
    update: np.random.Generator
    model: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Rngs":
        ss = np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(3)))


@dataclass
class IterationStats:
    critic: list[CriticStats] = field(default_factory=list)
    model_loss: float | None = None


def critic_update(agent: Agent, buffer: ReplayBuffer, rng: np.random.Generator) -> CriticStats:
    if agent.variant in ("td3", "td3_multi"):
        return td3_critic_step(agent, buffer.sample_arrays(agent.hp.batch_size, rng), rng)
    states = buffer.sample_states(agent.hp.batch_size, rng)
    if agent.variant in GRADIENT_CRITIC:
        return mage_critic_step(agent, states, rng)
    return dyna_critic_step(agent, states, rng)


def optimize(agent: Agent, buffer: ReplayBuffer, rng: np.random.Generator, rounds: int) -> list[CriticStats]:
    """``rounds`` critic updates, each followed by an actor update every ``policy_delay`` rounds."""
    stats = []
    for _ in range(rounds):
        stats.append(critic_update(agent, buffer, rng))
        if not agent.fixed_actor and agent.critic_updates % agent.policy_delay == 0:
            actor_step(agent, buffer.sample_states(agent.hp.batch_size, rng))
    return stats


def train_iteration(agent: Agent, collector: Collector, buffer: ReplayBuffer, rngs: Rngs) -> IterationStats:
    """One exploratory environment step, scheduled model fitting, then G updates.

    The first ``warmup_steps`` iterations only collect data.
    """
    obs = collector.observation()
    action = act(agent, obs, explore=True, rng=rngs.explore)
    buffer.push(collector.advance(action))
    agent.env_steps += 1
    out = IterationStats()
    if agent.uses_model and agent.env_steps % agent.hp.model_train_interval == 0:
        if agent.model is not None or agent.reward_model is not None:
            out.model_loss = fit_models(agent, buffer, rngs.model)
        else:
            agent.model_train_calls += 1
    if agent.env_steps > agent.hp.warmup_steps:
        out.critic = optimize(agent, buffer, rngs.update, agent.updates_per_step)
    return out
