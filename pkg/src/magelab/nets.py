"""MLPs over autodiff values, RAdam with decoupled weight decay, Polyak targets."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("swish", "tanh", "relu")


class DivergenceError(FloatingPointError):
    """Raised when an update would write non-finite values into parameters."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "swish"
    # "identity", ("tanh_scaled", bound) or ("gaussian_head", log_std_min, log_std_max)
    output_transform: tuple = ("identity",)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.output_transform, str):
            object.__setattr__(self, "output_transform", (self.output_transform,))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        kind = self.output_transform[0]
        if kind == "tanh_scaled":
            if not self.output_transform[1] > 0:
                raise ValueError("tanh_scaled bound must be positive")
        elif kind == "gaussian_head":
            lo, hi = self.output_transform[1:]
            if not lo < hi:
                raise ValueError("gaussian_head needs log_std_min < log_std_max")
        elif kind != "identity":
            raise ValueError(f"unknown output transform {kind!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, self.raw_output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def raw_output_dim(self) -> int:
        if self.output_transform[0] == "gaussian_head":
            return 2 * self.output_dim
        return self.output_dim


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass
class ParamSet:
    spec: MlpSpec
    params: dict[str, np.ndarray]
    opt: AdamState
    target: dict[str, np.ndarray] | None = None

    def names(self) -> list[str]:
        return list(self.params)

    def leaves(self, graph: ad.Graph) -> dict[str, ad.Value]:
        return {k: graph.param(v) for k, v in self.params.items()}

    def target_leaves(self, graph: ad.Graph) -> dict[str, ad.Value]:
        if self.target is None:
            raise ValueError("parameter set has no target copy")
        return {k: graph.constant(v) for k, v in self.target.items()}

    def constant_leaves(self, graph: ad.Graph) -> dict[str, ad.Value]:
        return {k: graph.constant(v) for k, v in self.params.items()}

    def with_target(self) -> "ParamSet":
        self.target = {k: v.copy() for k, v in self.params.items()}
        return self

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            AdamState({k: v.copy() for k, v in self.opt.m.items()},
                      {k: v.copy() for k, v in self.opt.v.items()}, self.opt.t),
            None if self.target is None else {k: v.copy() for k, v in self.target.items()},
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])


def init(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    params = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    opt = AdamState({k: np.zeros_like(v) for k, v in params.items()},
                    {k: np.zeros_like(v) for k, v in params.items()})
    return ParamSet(spec, params, opt)


def _activate(kind: str, x: ad.Value) -> ad.Value:
    if kind == "swish":
        return ad.swish(x)
    if kind == "tanh":
        return ad.tanh(x)
    return ad.relu(x)


def forward(params: dict[str, ad.Value], spec: MlpSpec, x: ad.Value) -> ad.Value:
    """Graph forward pass.  ``x`` has shape ``[batch, input_dim]``.

    A gaussian head returns ``[batch, 2*output_dim]``: mean then bounded log-std.
    """
    if len(x.shape) != 2 or x.shape[1] != spec.input_dim:
        raise ad.ShapeError(f"expected input [batch, {spec.input_dim}], got {x.shape}")
    n_layers = len(spec.layer_dims)
    h = x
    for i in range(n_layers):
        h = ad.bias_add(ad.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < n_layers - 1:
            h = _activate(spec.activation, h)
    kind = spec.output_transform[0]
    if kind == "tanh_scaled":
        return ad.scalar_mul(ad.tanh(h), spec.output_transform[1])
    if kind == "gaussian_head":
        lo, hi = spec.output_transform[1:]
        d = spec.output_dim
        mu = ad.slice_last(h, 0, d)
        raw = ad.slice_last(h, d, 2 * d)
        # squash onto (lo, hi): lo + (hi - lo) * (tanh(raw) + 1) / 2
        log_std = ad.add_scalar(ad.scalar_mul(ad.tanh(raw), 0.5 * (hi - lo)), 0.5 * (hi + lo))
        return ad.concat([mu, log_std])
    return h


def forward_array(params: dict[str, np.ndarray], spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass, numerically identical to :func:`forward`."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            if spec.activation == "swish":
                h = ad.np_swish(h)
            elif spec.activation == "tanh":
                h = np.tanh(h)
            else:
                h = ad.np_relu(h)
    kind = spec.output_transform[0]
    if kind == "tanh_scaled":
        h = np.tanh(h) * spec.output_transform[1]
    elif kind == "gaussian_head":
        lo, hi = spec.output_transform[1:]
        d = spec.output_dim
        h = np.concatenate([h[:, :d], np.tanh(h[:, d:]) * (0.5 * (hi - lo)) + 0.5 * (hi + lo)], axis=1)
    return h[0] if squeeze else h


@dataclass(frozen=True)
class RAdamConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    rectify: bool = True


def rectification(t: int, beta2: float) -> float | None:
    """Variance rectification factor at step ``t``; ``None`` when rho_t <= 4."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    if rho_t <= 4.0:
        return None
    return math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))


def radam_step(pset: ParamSet, grads: dict[str, np.ndarray], lr: float = 1e-4,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0, rectify: bool = True) -> None:
    """One in-place RAdam update with decoupled weight decay.

    ``rectify=False`` always takes the adaptive branch with unit rectification,
    which is exactly Adam.
    """
    for k, g in grads.items():
        if g.shape != pset.params[k].shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k} at step {pset.opt.t + 1}")
    beta1, beta2 = betas
    opt = pset.opt
    opt.t += 1
    t = opt.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    r = rectification(t, beta2) if rectify else 1.0
    for k, g in grads.items():
        p = pset.params[k]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m = opt.m[k]
        v = opt.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        if r is None:
            p -= lr * m_hat
        else:
            p -= (lr * r) * m_hat / (np.sqrt(v / bc2) + eps)


def polyak_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray], mix: float) -> None:
    """target <- mix * online + (1 - mix) * target, in place."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    for k, tgt in target.items():
        src = online[k]
        if src.shape != tgt.shape:
            raise ad.ShapeError(f"polyak: shape mismatch for {k}")
        tgt *= 1.0 - mix
        tgt += mix * src


# ---------------------------------------------------------------------------
# checkpoints: an .npz key -> array map with a version entry
# ---------------------------------------------------------------------------

def save_arrays(path: str | Path | io.BytesIO, arrays: dict[str, np.ndarray]) -> None:
    payload = {"__version__": np.array([CHECKPOINT_VERSION], dtype=np.int64)}
    for k, v in arrays.items():
        if k.startswith("__"):
            raise ValueError(f"reserved key {k!r}")
        payload[k] = np.asarray(v, dtype=np.float64)
    if isinstance(path, (str, Path)):
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
    else:
        np.savez(path, **payload)


def load_arrays(path: str | Path | io.BytesIO) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"][0]) if "__version__" in data else None
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return {k: data[k].copy() for k in data.files if k != "__version__"}


def paramset_arrays(pset: ParamSet, prefix: str = "") -> dict[str, np.ndarray]:
    out = {f"{prefix}{k}": v for k, v in pset.params.items()}
    if pset.target is not None:
        out.update({f"{prefix}target.{k}": v for k, v in pset.target.items()})
    out.update({f"{prefix}opt.m.{k}": v for k, v in pset.opt.m.items()})
    out.update({f"{prefix}opt.v.{k}": v for k, v in pset.opt.v.items()})
    out[f"{prefix}opt.t"] = np.array([pset.opt.t], dtype=np.float64)
    return out


def restore_paramset(pset: ParamSet, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    for k in pset.params:
        pset.params[k][...] = arrays[f"{prefix}{k}"]
        pset.opt.m[k][...] = arrays[f"{prefix}opt.m.{k}"]
        pset.opt.v[k][...] = arrays[f"{prefix}opt.v.{k}"]
        if pset.target is not None:
            pset.target[k][...] = arrays[f"{prefix}target.{k}"]
    pset.opt.t = int(arrays[f"{prefix}opt.t"][0])


def save_checkpoint(path, psets: dict[str, ParamSet]) -> None:
    arrays = {}
    for name, pset in psets.items():
        arrays.update(paramset_arrays(pset, prefix=f"{name}/"))
    save_arrays(path, arrays)


def load_checkpoint(path, psets: dict[str, ParamSet]) -> None:
    arrays = load_arrays(path)
    for name, pset in psets.items():
        restore_paramset(pset, arrays, prefix=f"{name}/")
