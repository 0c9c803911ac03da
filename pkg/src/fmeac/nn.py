"""Small dense-network substrate with hand-written backprop and Adam.

Everything is float64 numpy. A :class:`DenseNet` is a trunk of hidden
layers followed by one or more output heads that all read the last hidden
activation. ``forward`` caches what ``backward`` needs; ``backward``
consumes that cache, so every backward pass must be preceded by its own
forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Head:
    """Output head spec.

    kind is one of ``linear``, ``tanh_scaled``, ``softmax``, ``gaussian``.
    ``bound`` scales tanh heads (scalar or per-dimension), ``scale``
    multiplies softmax outputs, gaussian heads emit ``(mu, log_std)``.
    """

    kind: str
    dim: int
    bound: float | tuple[float, ...] = 1.0
    scale: float = 1.0
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX

    @property
    def raw_dim(self) -> int:
        return 2 * self.dim if self.kind == "gaussian" else self.dim


def linear(dim):
    return Head("linear", dim)


def tanh_scaled(dim, bound=1.0):
    return Head("tanh_scaled", dim, bound=_as_bound(bound))


def softmax(dim, scale=1.0):
    return Head("softmax", dim, scale=float(scale))


def gaussian(dim, log_std_min=LOG_STD_MIN, log_std_max=LOG_STD_MAX):
    return Head("gaussian", dim, log_std_min=log_std_min, log_std_max=log_std_max)


def _as_bound(bound):
    if np.ndim(bound) == 0:
        return float(bound)
    return tuple(float(b) for b in bound)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class DenseNet:
    """Fully connected trunk plus heads.

    Parameters live in ``self.params`` (name -> array) so optimizers,
    soft updates and checkpoints can treat every network uniformly.
    """

    def __init__(self, in_dim: int, hidden: list[int] | tuple[int, ...], heads: list[Head],
                 activation: str = "relu", rng: np.random.Generator | None = None):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        if not heads:
            raise ValueError("a DenseNet needs at least one head")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.hidden = [int(h) for h in hidden]
        self.heads = list(heads)
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}
        sizes = [self.in_dim] + self.hidden
        for i in range(len(self.hidden)):
            self._init_layer(f"l{i}", sizes[i], sizes[i + 1], rng)
        for k, head in enumerate(self.heads):
            self._init_layer(f"h{k}", sizes[-1], head.raw_dim, rng)
        self._cache = None

    def _init_layer(self, name, fan_in, fan_out, rng):
        lim = 1.0 / math.sqrt(fan_in)
        self.params[f"{name}.W"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        self.params[f"{name}.b"] = rng.uniform(-lim, lim, size=(fan_out,))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.in_dim] + self.hidden

    def copy(self) -> "DenseNet":
        other = object.__new__(DenseNet)
        other.in_dim = self.in_dim
        other.hidden = list(self.hidden)
        other.heads = list(self.heads)
        other.activation = self.activation
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._cache = None
        return other

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: np.ndarray) -> list:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise DimensionError(f"expected input last dim {self.in_dim}, got shape {x.shape}")
        acts = [X]
        h = X
        for i in range(len(self.hidden)):
            z = h @ self.params[f"l{i}.W"] + self.params[f"l{i}.b"]
            h = np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)
            acts.append(h)
        outs, head_cache = [], []
        for k, head in enumerate(self.heads):
            z = h @ self.params[f"h{k}.W"] + self.params[f"h{k}.b"]
            if head.kind == "linear":
                out = z
                head_cache.append(None)
            elif head.kind == "tanh_scaled":
                t = np.tanh(z)
                out = np.asarray(head.bound) * t
                head_cache.append(t)
            elif head.kind == "softmax":
                p = softmax_rows(z)
                out = head.scale * p
                head_cache.append(p)
            elif head.kind == "gaussian":
                d = head.dim
                raw = z[:, d:]
                log_std = np.clip(raw, head.log_std_min, head.log_std_max)
                out = (z[:, :d], log_std)
                head_cache.append((raw > head.log_std_min) & (raw < head.log_std_max))
            else:
                raise ValueError(f"unknown head kind {head.kind!r}")
            outs.append(out)
        self._cache = (acts, head_cache, single)
        if single:
            outs = [tuple(o[0] for o in out) if isinstance(out, tuple) else out[0] for out in outs]
        return outs

    def __call__(self, x):
        return self.forward(x)

    def infer(self, x) -> list:
        """Forward pass that leaves no backward cache behind."""
        saved = self._cache
        try:
            return self.forward(x)
        finally:
            self._cache = saved

    def backward(self, grad_outputs: list) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backprop upstream gradients (one entry per head, ``None`` = zero).

        Returns parameter gradients and the gradient w.r.t. the input.
        """
        if self._cache is None:
            raise ContractError("backward called without a matching forward pass")
        acts, head_cache, single = self._cache
        self._cache = None
        if len(grad_outputs) != len(self.heads):
            raise DimensionError(f"expected {len(self.heads)} head gradients, got {len(grad_outputs)}")
        h = acts[-1]
        B = h.shape[0]
        grads: dict[str, np.ndarray] = {}
        gh = np.zeros_like(h)
        for k, (head, g) in enumerate(zip(self.heads, grad_outputs)):
            if g is None:
                grads[f"h{k}.W"] = np.zeros_like(self.params[f"h{k}.W"])
                grads[f"h{k}.b"] = np.zeros_like(self.params[f"h{k}.b"])
                continue
            if head.kind == "gaussian":
                gmu, gls = (np.zeros((B, head.dim)) if gi is None else _rows(gi, single) for gi in g)
                gz = np.concatenate([gmu, gls * head_cache[k]], axis=1)
            else:
                g = _rows(g, single)
                if head.kind == "linear":
                    gz = g
                elif head.kind == "tanh_scaled":
                    t = head_cache[k]
                    gz = g * np.asarray(head.bound) * (1.0 - t * t)
                else:
                    p = head_cache[k]
                    gp = head.scale * g
                    gz = p * (gp - (gp * p).sum(axis=1, keepdims=True))
            grads[f"h{k}.W"] = h.T @ gz
            grads[f"h{k}.b"] = gz.sum(axis=0)
            gh = gh + gz @ self.params[f"h{k}.W"].T
        for i in reversed(range(len(self.hidden))):
            out = acts[i + 1]
            if self.activation == "relu":
                gz = gh * (out > 0.0)
            else:
                gz = gh * (1.0 - out * out)
            grads[f"l{i}.W"] = acts[i].T @ gz
            grads[f"l{i}.b"] = gz.sum(axis=0)
            gh = gz @ self.params[f"l{i}.W"].T
        return grads, (gh[0] if single else gh)


def _rows(g, single):
    g = np.asarray(g, dtype=np.float64)
    return g[None, :] if single else g


class Adam:
    """Adam with bias correction over a dict of parameter arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {self.params[name].shape} for {name}")
            bad = ~np.isfinite(g)
            if bad.any():
                idx = int(np.flatnonzero(bad)[0])
                raise NumericError(f"non-finite gradient for parameter {name!r} at flat index {idx}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step = self.lr / bc1
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v)
            denom *= 1.0 / math.sqrt(bc2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= step
            self.params[name] -= denom

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors[f"{prefix}.t"][0])
        for k in self.params:
            self.m[k][...] = tensors[f"{prefix}.m.{k}"]
            self.v[k][...] = tensors[f"{prefix}.v.{k}"]


def gaussian_sample(mu, log_std, rng=None, bound=1.0, noise=None):
    """Reparameterized tanh-squashed Gaussian sample.

    Returns ``(pre_tanh, action, log_prob, noise)``; ``log_prob`` sums over
    the last axis and includes the tanh and bound change of variables.
    Pass ``noise`` to freeze the standard-normal draw.
    """
    mu = np.asarray(mu, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    std = np.exp(log_std)
    u = mu + std * noise
    t = np.tanh(u)
    bound = np.asarray(bound, dtype=np.float64)
    action = bound * t
    log_prob = (-0.5 * noise**2 - log_std - _HALF_LOG_2PI
                - np.log(np.broadcast_to(bound, u.shape)) - _log1m_tanh2(u)).sum(axis=-1)
    return u, action, log_prob, noise


def _log1m_tanh2(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def gaussian_sample_grads(u, log_std, noise, bound, g_action, g_logp):
    """Chain upstream gradients on (action, log_prob) back to (mu, log_std).

    ``g_logp`` has one entry per row (the log-prob is summed per row).
    """
    t = np.tanh(u)
    std = np.exp(log_std)
    g_u = g_action * np.asarray(bound) * (1.0 - t * t) + g_logp[..., None] * (2.0 * t)
    g_mu = g_u
    g_log_std = g_u * std * noise - g_logp[..., None]
    return g_mu, g_log_std
