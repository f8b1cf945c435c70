"""Ensemble of Gaussian-output MLPs predicting the state delta ``s' - s``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets

LOG_STD_BOUNDS = (-5.0, 2.0)


@dataclass
class EnsembleModel:
    members: list[nets.ParamSet]
    obs_dim: int
    action_dim: int
    in_mean: np.ndarray
    in_std: np.ndarray
    lr: float = 1e-4
    weight_decay: float = 1e-4
    train_calls: int = 0

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> nets.MlpSpec:
        return self.members[0].spec

    def set_input_stats(self, inputs: np.ndarray) -> None:
        self.in_mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        self.in_std = np.where(std < 1e-6, 1.0, std)

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {"in_mean": self.in_mean, "in_std": self.in_std}
        for i, m in enumerate(self.members):
            out.update(nets.paramset_arrays(m, prefix=f"member{i}/"))
        return out


def make_ensemble(obs_dim: int, action_dim: int, rng: np.random.Generator, size: int = 8,
                  hidden=(128, 128), activation: str = "swish", lr: float = 1e-4,
                  weight_decay: float = 1e-4) -> EnsembleModel:
    if size < 1:
        raise ValueError("ensemble needs at least one member")
    spec = nets.MlpSpec(obs_dim + action_dim, tuple(hidden), obs_dim, activation,
                        ("gaussian_head", *LOG_STD_BOUNDS))
    members = [nets.init(spec, rng) for _ in range(size)]
    d = obs_dim + action_dim
    return EnsembleModel(members, obs_dim, action_dim, np.zeros(d), np.ones(d), lr, weight_decay)


def _standardize(graph: ad.Graph, model: EnsembleModel, s: ad.Value, a: ad.Value) -> ad.Value:
    x = ad.concat([s, a])
    inv = graph.constant(np.diag(1.0 / model.in_std))
    return ad.bias_add(ad.matmul(x, inv), graph.constant(-model.in_mean / model.in_std))


def member_output(graph: ad.Graph, model: EnsembleModel, params: dict[str, ad.Value],
                  s: ad.Value, a: ad.Value) -> tuple[ad.Value, ad.Value]:
    """Mean and bounded log-std of the predicted delta."""
    out = nets.forward(params, model.spec, _standardize(graph, model, s, a))
    d = model.obs_dim
    return ad.slice_last(out, 0, d), ad.slice_last(out, d, 2 * d)


def nll_from_output(graph: ad.Graph, mu: ad.Value, log_std: ad.Value, delta: ad.Value) -> ad.Value:
    """Batch mean of sum_d (delta - mu)^2 / (2 sigma^2) + log sigma."""
    resid = ad.sub(delta, mu)
    inv_var = ad.exp(ad.scalar_mul(log_std, -2.0))
    per_dim = ad.add(ad.scalar_mul(ad.mul(ad.square(resid), inv_var), 0.5), log_std)
    return ad.scalar_mul(ad.sum(per_dim), 1.0 / delta.shape[0])


def nll_loss(graph: ad.Graph, model: EnsembleModel, params: dict[str, ad.Value],
             s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> ad.Value:
    if len(s) == 0:
        raise ValueError("empty batch")
    sv, av = graph.constant(s), graph.constant(a)
    mu, log_std = member_output(graph, model, params, sv, av)
    return nll_from_output(graph, mu, log_std, graph.constant(np.asarray(s_next) - np.asarray(s)))


def sample_reparam(graph: ad.Graph, model: EnsembleModel, member: int, s: ad.Value, a: ad.Value,
                   rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> ad.Value:
    """s_hat = s + mu(s, a) + sigma(s, a) * eps with eps drawn once and held constant."""
    params = model.members[member].constant_leaves(graph)
    mu, log_std = member_output(graph, model, params, s, a)
    if noise is None:
        rng = rng if rng is not None else graph.rng
        noise = rng.standard_normal(mu.shape)
    eps = graph.constant(noise)
    return ad.add(s, ad.gaussian_reparam(mu, log_std, eps))


def choose_member(model: EnsembleModel, rng: np.random.Generator) -> int:
    return int(rng.integers(model.size))


def ensemble_sample(graph: ad.Graph, model: EnsembleModel, s: ad.Value, a: ad.Value,
                    rng: np.random.Generator | None = None) -> ad.Value:
    """Pick one member uniformly, then draw a reparameterized next state from it."""
    rng = rng if rng is not None else graph.rng
    return sample_reparam(graph, model, choose_member(model, rng), s, a, rng)


def predict_mean(model: EnsembleModel, member: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    x = (np.concatenate([s, a], axis=-1) - model.in_mean) / model.in_std
    out = nets.forward_array(model.members[member].params, model.spec, x)
    return out[..., :model.obs_dim]


def train(model: EnsembleModel, s: np.ndarray, a: np.ndarray, s_next: np.ndarray, rng: np.random.Generator,
          batches: int = 120, batch_size: int = 256) -> float:
    """Fit every member by maximum likelihood on independently drawn batches.

    Batches are drawn with replacement, so a dataset smaller than the batch
    size is fine.  Returns the mean loss over batches and members.
    """
    n = len(s)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    model.set_input_stats(np.concatenate([s, a], axis=-1))
    delta = s_next - s
    total = 0.0
    for b in range(batches):
        graph = ad.Graph()
        leaves = [m.leaves(graph) for m in model.members]
        losses = []
        for params in leaves:
            idx = rng.integers(0, n, size=batch_size)
            sv, av = graph.constant(s[idx]), graph.constant(a[idx])
            mu, log_std = member_output(graph, model, params, sv, av)
            losses.append(nll_from_output(graph, mu, log_std, graph.constant(delta[idx])))
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        value = float(loss.data)
        if not np.isfinite(value):
            raise nets.DivergenceError(f"model loss became non-finite at train call {model.train_calls}, batch {b}")
        flat = [v for params in leaves for v in params.values()]
        grads = ad.grad_arrays(loss, flat)
        k = 0
        for member, params in zip(model.members, leaves):
            names = list(params)
            nets.radam_step(member, dict(zip(names, grads[k:k + len(names)])), lr=model.lr,
                            weight_decay=model.weight_decay)
            k += len(names)
        total += value / model.size
    model.train_calls += 1
    return total / batches
