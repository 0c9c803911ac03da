"""Feature models: graph convolution network, point-array network, battery predictor.

Graph and point inputs are batched and padded: ``nodes`` has shape
(B, N, d) with a boolean ``mask`` of shape (B, N) marking real entries.
"""
from __future__ import annotations

import math

import numpy as np

from . import checkpoint
from .errors import ContractError, DimensionError
from .nn import Adam, DenseNet, linear

POS = slice(-4, -1)   # node layout: [..., x, y, z, scalar]


# ---------------------------------------------------------------- graphs

def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Add self-loops and apply symmetric degree normalization D^-1/2 (A+I) D^-1/2."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ContractError("adjacency must be symmetric")
    if np.any(a < 0):
        raise ContractError("adjacency must be non-negative")
    at = a + np.eye(len(a))
    inv = 1.0 / np.sqrt(at.sum(axis=1))
    return at * np.outer(inv, inv)


def batch_adjacency(nodes: np.ndarray, mask: np.ndarray, radius: float) -> np.ndarray:
    """Normalized adjacency for a padded batch; edges join real nodes closer than ``radius``.

    Padding nodes keep only their self-loop, so they never mix with real nodes.
    """
    pos = nodes[..., POS]
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    dist2 = np.einsum("bijk,bijk->bij", diff, diff)
    both = mask[:, :, None] & mask[:, None, :]
    a = ((dist2 < radius * radius) & both).astype(np.float64)
    n = a.shape[1]
    idx = np.arange(n)
    a[:, idx, idx] = 1.0
    inv = 1.0 / np.sqrt(a.sum(axis=2))
    return a * (inv[:, :, None] * inv[:, None, :])


def pad_graphs(graphs: list[np.ndarray], n_max: int | None = None):
    n_max = n_max or max(len(g) for g in graphs)
    d = graphs[0].shape[1]
    nodes = np.zeros((len(graphs), n_max, d))
    mask = np.zeros((len(graphs), n_max), dtype=bool)
    for b, g in enumerate(graphs):
        if len(g) > n_max:
            raise DimensionError(f"graph with {len(g)} nodes exceeds padding size {n_max}")
        nodes[b, :len(g)] = g
        mask[b, :len(g)] = True
    return nodes, mask


class GnnModel:
    """Two ReLU graph-convolution layers, masked mean pooling, scaled by ``beta``."""

    kind = "gnn"

    def __init__(self, node_dim: int, hidden: int = 64, out_dim: int = 32, beta: float = 0.01,
                 radius: float = 0.25, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.node_dim, self.hidden, self.out_dim = node_dim, hidden, out_dim
        self.beta = beta
        self.radius = radius
        self.params = {
            "W1": rng.uniform(-1, 1, (node_dim, hidden)) / math.sqrt(node_dim),
            "W2": rng.uniform(-1, 1, (hidden, out_dim)) / math.sqrt(hidden),
        }
        self._cache = None

    def forward(self, nodes, mask, adj=None) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.shape[-1] != self.node_dim:
            raise DimensionError(f"node features have dim {nodes.shape[-1]}, model expects {self.node_dim}")
        if adj is None:
            adj = batch_adjacency(nodes, mask, self.radius)
        m1 = adj @ nodes
        pre1 = m1 @ self.params["W1"]
        z1 = np.maximum(pre1, 0.0)
        m2 = adj @ z1
        pre2 = m2 @ self.params["W2"]
        z2 = np.maximum(pre2, 0.0)
        w = mask.astype(np.float64)
        count = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        pooled = np.einsum("bn,bnf->bf", w, z2) / count
        self._cache = (adj, m1, pre1, m2, pre2, w, count)
        return self.beta * pooled

    def backward(self, g_out) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise ContractError("backward called without a matching forward pass")
        adj, m1, pre1, m2, pre2, w, count = self._cache
        self._cache = None
        g_pool = self.beta * np.asarray(g_out) / count
        g_pre2 = w[:, :, None] * g_pool[:, None, :] * (pre2 > 0)
        g_w2 = np.einsum("bnh,bnf->hf", m2, g_pre2)
        g_z1 = np.swapaxes(adj, 1, 2) @ (g_pre2 @ self.params["W2"].T)
        g_pre1 = g_z1 * (pre1 > 0)
        g_w1 = np.einsum("bnd,bnh->dh", m1, g_pre1)
        return {"W1": g_w1, "W2": g_w2}

    def feature(self, graph_nodes: np.ndarray) -> np.ndarray:
        nodes, mask = pad_graphs([graph_nodes])
        return self.forward(nodes, mask)[0]

    def tensors(self):
        return {f"gnn.{k}": v for k, v in self.params.items()} | {
            "gnn.meta": np.array([self.node_dim, self.hidden, self.out_dim, self.beta, self.radius])}

    @classmethod
    def from_tensors(cls, t):
        nd, h, f, beta, radius = t["gnn.meta"]
        model = cls(int(nd), int(h), int(f), float(beta), float(radius))
        for k in model.params:
            model.params[k] = t[f"gnn.{k}"].copy()
        return model

    def save(self, path):
        checkpoint.save(path, self.tensors(), kind="gnn")

    @classmethod
    def load(cls, path):
        return cls.from_tensors(checkpoint.load(path, kind="gnn"))


# ---------------------------------------------------------------- point arrays

def pad_points(arrays: list[np.ndarray], max_points: int, point_dim: int):
    pts = np.zeros((len(arrays), max_points, point_dim))
    mask = np.zeros((len(arrays), max_points), dtype=bool)
    for b, arr in enumerate(arrays):
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, point_dim)[:max_points]
        pts[b, :len(arr)] = arr
        mask[b, :len(arr)] = True
    return pts, mask


class PanModel:
    """Shared per-point encoder with masked mean pooling, plus a detachable decoder head.

    The head reconstructs each point's payload from the pooled code and the
    point's position; it exists only for pretraining and is dropped by
    :meth:`freeze`.
    """

    kind = "pan"

    def __init__(self, point_dim: int, pos_dim: int = 3, hidden: int = 64, out_dim: int = 32,
                 beta: float = 0.01, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.point_dim, self.pos_dim, self.out_dim, self.beta = point_dim, pos_dim, out_dim, beta
        self.hidden = hidden
        self.encoder = DenseNet(point_dim, [hidden, hidden], [linear(out_dim)], rng=rng)
        self.head: DenseNet | None = DenseNet(out_dim + pos_dim, [hidden], [linear(point_dim - pos_dim)], rng=rng)
        self.frozen = False

    def _encode(self, pts, mask):
        B, P, d = pts.shape
        z = self.encoder.forward(pts.reshape(B * P, d))[0].reshape(B, P, -1)
        w = mask.astype(np.float64)
        count = w.sum(axis=1, keepdims=True)
        pooled = np.einsum("bp,bpf->bf", w, z) / np.maximum(count, 1.0)
        empty = count[:, 0] == 0
        if empty.any():
            pad = self._pad_embedding()
            pooled[empty] = pad
        return pooled, w, count

    def _pad_embedding(self):
        return self.encoder.infer(np.zeros(self.point_dim))[0]

    def embed(self, pts, mask) -> np.ndarray:
        """Unscaled pooled code for a padded batch."""
        return self._encode(np.asarray(pts, dtype=np.float64), mask)[0]

    def feature(self, points: np.ndarray, max_points: int) -> np.ndarray:
        pts, mask = pad_points([points], max_points, self.point_dim)
        return self.beta * self.embed(pts, mask)[0]

    def features(self, arrays: list[np.ndarray], max_points: int) -> np.ndarray:
        pts, mask = pad_points(arrays, max_points, self.point_dim)
        return self.beta * self.embed(pts, mask)

    def reconstruction_loss(self, pts, mask, grad: bool = False):
        """Mean squared payload error over real points; optionally with parameter gradients."""
        if self.head is None:
            raise ContractError("PAN head was removed; the model is frozen")
        B, P, d = pts.shape
        pooled, w, count = self._encode(pts, mask)
        pos = pts[..., :self.pos_dim]
        inp = np.concatenate([np.broadcast_to(pooled[:, None, :], (B, P, self.out_dim)), pos], axis=2)
        pred = self.head.forward(inp.reshape(B * P, -1))[0].reshape(B, P, -1)
        resid = (pred - pts[..., self.pos_dim:]) * w[..., None]
        n_real = max(w.sum(), 1.0)
        loss = float((resid**2).sum() / n_real)
        if not grad:
            self.head._cache = None
            self.encoder._cache = None
            return loss, None
        g_pred = 2.0 * resid / n_real
        g_head, g_inp = self.head.backward([g_pred.reshape(B * P, -1)])
        g_pooled = g_inp.reshape(B, P, -1)[..., :self.out_dim].sum(axis=1)
        g_z = w[..., None] * (g_pooled / np.maximum(count, 1.0))[:, None, :]
        g_enc, _ = self.encoder.backward([g_z.reshape(B * P, -1)])
        grads = {f"enc.{k}": v for k, v in g_enc.items()} | {f"head.{k}": v for k, v in g_head.items()}
        return loss, grads

    def param_dict(self):
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        if self.head is not None:
            out |= {f"head.{k}": v for k, v in self.head.params.items()}
        return out

    def freeze(self) -> "PanModel":
        self.head = None
        self.frozen = True
        for v in self.encoder.params.values():
            v.flags.writeable = False
        return self

    def tensors(self):
        t = {f"pan.{k}": v for k, v in self.encoder.params.items()}
        t["pan.meta"] = np.array([self.point_dim, self.pos_dim, self.hidden, self.out_dim, self.beta])
        return t

    @classmethod
    def from_tensors(cls, t):
        pd, pos, h, f, beta = t["pan.meta"]
        model = cls(int(pd), int(pos), int(h), int(f), float(beta))
        for k in model.encoder.params:
            model.encoder.params[k] = t[f"pan.{k}"].copy()
        return model.freeze()

    def save(self, path):
        checkpoint.save(path, self.tensors(), kind="pan")

    @classmethod
    def load(cls, path):
        return cls.from_tensors(checkpoint.load(path, kind="pan"))


def pan_pretrain(dataset: list[np.ndarray], point_dim: int, *, max_points: int, epochs: int,
                 batch: int, lr: float, hidden: int = 64, out_dim: int = 32, beta: float = 0.01,
                 rng=None, history: list | None = None) -> PanModel:
    """Fit encoder + head on padded point arrays, then drop the head and freeze."""
    if len(dataset) == 0:
        raise ContractError("PAN pretraining needs a non-empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = PanModel(point_dim, hidden=hidden, out_dim=out_dim, beta=beta, rng=rng)
    pts, mask = pad_points(dataset, max_points, point_dim)
    params = model.param_dict()
    opt = Adam(params, lr=lr)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, grads = model.reconstruction_loss(pts[idx], mask[idx], grad=True)
            opt.step(grads)
        if history is not None:
            history.append(model.reconstruction_loss(pts, mask)[0])
    return model.freeze()


# ---------------------------------------------------------------- battery prediction

class BpnModel:
    """Regressor from a task-transition state to the energy (J) needed to return home."""

    kind = "bpn"

    def __init__(self, in_dim: int, hidden: int = 64, scale: float = 1.0, rng=None):
        self.net = DenseNet(in_dim, [hidden, hidden], [linear(1)], rng=rng)
        self.in_dim, self.hidden = in_dim, hidden
        self.scale = scale
        self.frozen = False

    def predict(self, s_e) -> np.ndarray:
        s_e = np.asarray(s_e, dtype=np.float64)
        out = self.net.infer(s_e)[0]
        return out[..., 0] * self.scale

    __call__ = predict

    def freeze(self):
        self.frozen = True
        for v in self.net.params.values():
            v.flags.writeable = False
        return self

    def tensors(self):
        t = {f"bpn.{k}": v for k, v in self.net.params.items()}
        t["bpn.meta"] = np.array([self.in_dim, self.hidden, self.scale])
        return t

    @classmethod
    def from_tensors(cls, t):
        d, h, scale = t["bpn.meta"]
        model = cls(int(d), int(h), float(scale))
        for k in model.net.params:
            model.net.params[k] = t[f"bpn.{k}"].copy()
        return model.freeze()

    def save(self, path):
        checkpoint.save(path, self.tensors(), kind="bpn")

    @classmethod
    def load(cls, path):
        return cls.from_tensors(checkpoint.load(path, kind="bpn"))


def bpn_pretrain(states: np.ndarray, labels: np.ndarray, *, epochs: int, batch: int, lr: float,
                 hidden: int = 64, rng=None, history: list | None = None) -> BpnModel:
    """Least-squares fit of energy-to-return labels (scaled by their mean) and freeze."""
    states = np.asarray(states, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(states) == 0:
        raise ContractError("BPN pretraining needs a non-empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    scale = float(max(np.mean(np.abs(labels)), 1e-9))
    model = BpnModel(states.shape[1], hidden, scale, rng=rng)
    y = labels / scale
    opt = Adam(model.net.params, lr=lr)
    n = len(states)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            pred = model.net.forward(states[idx])[0][:, 0]
            resid = pred - y[idx]
            grads, _ = model.net.backward([(2.0 * resid / len(idx))[:, None]])
            opt.step(grads)
        if history is not None:
            history.append(float(np.mean((model.predict(states) - labels) ** 2)))
    return model.freeze()
