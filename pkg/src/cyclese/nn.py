"""Differentiable building blocks: LSTMP mapping networks and frame discriminators.

Networks are plain containers of named float64 arrays. ``forward`` returns
outputs plus a cache; ``backward`` consumes the cache and the upstream
gradient and returns parameter gradients together with input gradients, so
networks can be chained (F after G, discriminator after F, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import ConfigError, DimensionError, NumericError, StateError

PAPER_HIDDEN = 512
PAPER_PROJ = 256
PAPER_LAYERS = 2
PAPER_DISC_HIDDEN = 512


@dataclass(frozen=True)
class MappingSpec:
    input_dim: int
    output_dim: int
    hidden: int = PAPER_HIDDEN
    proj: int = PAPER_PROJ
    layers: int = PAPER_LAYERS

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        fan_in = self.input_dim
        for l in range(self.layers):
            out[f"l{l}.w_in"] = (4 * self.hidden, fan_in)
            out[f"l{l}.w_rec"] = (4 * self.hidden, self.proj)
            out[f"l{l}.b"] = (4 * self.hidden,)
            out[f"l{l}.w_proj"] = (self.proj, self.hidden)
            fan_in = self.proj
        out["out.w"] = (self.output_dim, self.proj)
        out["out.b"] = (self.output_dim,)
        return out


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int
    hidden: int = PAPER_DISC_HIDDEN
    layers: int = PAPER_LAYERS

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        fan_in = self.input_dim
        for l in range(self.layers):
            out[f"h{l}.w"] = (self.hidden, fan_in)
            out[f"h{l}.b"] = (self.hidden,)
            fan_in = self.hidden
        out["out.w"] = (1, fan_in)
        out["out.b"] = (1,)
        return out


def init_params(seed: int, spec) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, LSTM forget-gate biases at 1."""
    for value in vars(spec).values():
        if not (isinstance(value, (int, np.integer)) and value >= 1):
            raise ConfigError(f"invalid network spec {spec}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.shapes().items():
        if len(shape) == 1:
            b = np.zeros(shape)
            if isinstance(spec, MappingSpec) and name.endswith(".b") and name.startswith("l"):
                b[spec.hidden:2 * spec.hidden] = 1.0
            params[name] = b
        else:
            fan_out, fan_in = shape
            r = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-r, r, size=shape)
    return params


def init_bound(shape) -> float:
    fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _as_frames(x, dim, who):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{who} expects a T x {dim} matrix, got shape {x.shape}")
    if x.shape[0] < 1:
        raise DimensionError(f"{who} needs at least one frame")
    if x.shape[1] != dim:
        raise DimensionError(f"{who} expects {dim}-dim input, got {x.shape[1]}")
    return x


@dataclass
class ForwardCache:
    owner: object
    inputs: np.ndarray
    layers: list = field(default_factory=list)
    top: np.ndarray | None = None

    def __len__(self):
        return self.inputs.shape[0]


class MappingNetwork:
    """Stack of unidirectional LSTMP layers followed by a linear output head.

    Each layer computes the standard input/forget/cell/output gates (no
    peepholes); its hidden state is projected to ``proj`` dims and the
    projection is both the layer output and the recurrent input.
    """

    def __init__(self, spec: MappingSpec, params=None, seed: int = 0):
        self.spec = spec
        self.params = init_params(seed, spec) if params is None else params
        shapes = spec.shapes()
        if set(self.params) != set(shapes):
            raise ConfigError("parameter names do not match the network spec")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def input_dim(self):
        return self.spec.input_dim

    @property
    def output_dim(self):
        return self.spec.output_dim

    def copy(self) -> "MappingNetwork":
        return MappingNetwork(self.spec, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x):
        x = _as_frames(x, self.spec.input_dim, "mapping network")
        p = self.params
        cache = ForwardCache(self, x)
        h = x
        for l in range(self.spec.layers):
            zx = h @ p[f"l{l}.w_in"].T + p[f"l{l}.b"]
            gates, cells, hidden, proj = _kernels.lstmp_forward(zx, p[f"l{l}.w_rec"], p[f"l{l}.w_proj"])
            cache.layers.append((h, gates, cells, hidden, proj))
            h = proj
        cache.top = h
        return h @ p["out.w"].T + p["out.b"], cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, out_grads):
        if cache.owner is not self:
            raise StateError("cache was produced by a different network")
        dy = np.asarray(out_grads, dtype=np.float64)
        if dy.shape != (len(cache), self.spec.output_dim):
            raise StateError(f"output gradient shape {dy.shape} does not match the cached pass")
        p = self.params
        grads = {}
        grads["out.w"] = dy.T @ cache.top
        grads["out.b"] = dy.sum(axis=0)
        d_proj = dy @ p["out.w"]
        for l in reversed(range(self.spec.layers)):
            h_in, gates, cells, hidden, proj = cache.layers[l]
            w_in, w_rec, w_proj = p[f"l{l}.w_in"], p[f"l{l}.w_rec"], p[f"l{l}.w_proj"]
            dz, dr = _kernels.lstmp_backward(d_proj, gates, cells, hidden, w_rec, w_proj)
            grads[f"l{l}.w_in"] = dz.T @ h_in
            grads[f"l{l}.b"] = dz.sum(axis=0)
            grads[f"l{l}.w_rec"] = dz[1:].T @ proj[:-1]
            grads[f"l{l}.w_proj"] = dr.T @ hidden
            d_proj = dz @ w_in
        return {k: grads[k] for k in p}, d_proj


class Discriminator:
    """Frame-level classifier: ReLU hidden layers and one sigmoid output unit."""

    def __init__(self, spec: DiscriminatorSpec, params=None, seed: int = 0):
        self.spec = spec
        self.params = init_params(seed, spec) if params is None else params
        shapes = spec.shapes()
        if set(self.params) != set(shapes):
            raise ConfigError("parameter names do not match the discriminator spec")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def input_dim(self):
        return self.spec.input_dim

    def copy(self) -> "Discriminator":
        return Discriminator(self.spec, {k: v.copy() for k, v in self.params.items()})

    def forward(self, frames):
        """Posterior for each frame. A single D-vector is treated as one frame."""
        frames = np.asarray(getattr(frames, "data", frames), dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[None, :]
        x = _as_frames(frames, self.spec.input_dim, "discriminator")
        p = self.params
        acts = [x]
        h = x
        for l in range(self.spec.layers):
            h = np.maximum(h @ p[f"h{l}.w"].T + p[f"h{l}.b"], 0.0)
            acts.append(h)
        logit = (h @ p["out.w"].T + p["out.b"])[:, 0]
        post = expit(logit)
        cache = ForwardCache(self, x, acts, logit)
        # keep the posterior strictly inside (0, 1) even when the logit saturates
        return np.clip(post, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg), cache

    def __call__(self, frames):
        return self.forward(frames)[0]

    def backward(self, cache: ForwardCache, d_post):
        if cache.owner is not self:
            raise StateError("cache was produced by a different discriminator")
        d_post = np.asarray(d_post, dtype=np.float64).reshape(-1)
        if d_post.shape[0] != len(cache):
            raise StateError("gradient length does not match the cached pass")
        post = expit(cache.top)
        return self.backward_logit(cache, d_post * post * (1.0 - post))

    def backward_logit(self, cache: ForwardCache, d_logit):
        """Like ``backward`` but starting from dLoss/dlogit."""
        if cache.owner is not self:
            raise StateError("cache was produced by a different discriminator")
        d_logit = np.asarray(d_logit, dtype=np.float64).reshape(-1)
        if d_logit.shape[0] != len(cache):
            raise StateError("gradient length does not match the cached pass")
        p = self.params
        d = d_logit[:, None]
        acts = cache.layers
        grads = {"out.w": d.T @ acts[-1], "out.b": d.sum(axis=0)}
        d = d @ p["out.w"]
        for l in reversed(range(self.spec.layers)):
            d = d * (acts[l + 1] > 0)
            grads[f"h{l}.w"] = d.T @ acts[l]
            grads[f"h{l}.b"] = d.sum(axis=0)
            d = d @ p[f"h{l}.w"]
        return {k: grads[k] for k in p}, d


def map_forward(net: MappingNetwork, seq):
    return net.forward(seq)


def map_backward(net: MappingNetwork, cache: ForwardCache, out_grads):
    return net.backward(cache, out_grads)


def disc_forward(d: Discriminator, frames):
    return d.forward(frames)


def disc_backward(d: Discriminator, cache: ForwardCache, d_post):
    return d.backward(cache, d_post)


def grl(grad_in, lam: float):
    """Backward pass of a gradient reversal layer: ``-lam * grad_in``.

    The forward pass is the identity and needs no function.
    """
    if not lam >= 0:
        raise ConfigError(f"GRL strength must be non-negative, got {lam}")
    return -lam * np.asarray(grad_in, dtype=np.float64)


def grad_check(params, probe, epsilon: float = 1e-5, max_params: int | None = None,
               seed: int = 0, loss_fn=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``params`` is a network (its ``.params`` are used) or any dict of arrays;
    entries are perturbed in place and restored. ``probe()`` must return
    ``(loss, grads)`` with ``grads`` keyed like ``params``. With
    ``max_params`` set, a seeded random subset of that many scalar entries is
    checked instead of all of them. ``loss_fn``, if given, is used for the
    perturbed evaluations so they can skip the backward pass.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = getattr(params, "params", params)
    loss, analytic = probe()
    if not np.isfinite(loss):
        raise NumericError("probe", "probe loss is not finite")
    evaluate = loss_fn if loss_fn is not None else (lambda: probe()[0])
    index = [(name, i) for name, arr in params.items() for i in range(arr.size)]
    if max_params is not None and max_params < len(index):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(index), size=max_params, replace=False)
        index = [index[k] for k in sorted(picks)]
    worst = 0.0
    for name, i in index:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = evaluate()
        flat[i] = orig - epsilon
        down = evaluate()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(name, f"non-finite probe loss while perturbing {name}[{i}]")
        numeric = (up - down) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
