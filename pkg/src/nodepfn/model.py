"""Dual-branch prior-fitted network for node classification.

Each layer runs a context/query attention branch (every node attends to the
labelled context nodes of its own task) next to a GCN-style message-passing
branch, and fuses both with the input through a residual LayerNorm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

from . import numerics as nx
from .graph import Graph, Task
from .numerics import AttentionSegment, Tensor


@dataclass
class ModelConfig:
    d_embed: int = 512
    n_layers: int = 12
    n_heads: int = 4
    dropout: float = 0.0
    d_feat_max: int = 100
    max_classes: int = 20
    fusion_mode: str = "parallel"
    mpnn_enabled: bool = True
    ffn_enabled: bool = False
    self_loops: bool = False
    attention_enabled: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_embed < 1 or self.n_layers < 0 or self.n_heads < 1:
            raise ValueError("d_embed, n_layers and n_heads must be positive")
        if self.d_embed % self.n_heads:
            raise ValueError("d_embed must be divisible by n_heads")
        if not 1 <= self.max_classes <= 20:
            raise ValueError("max_classes must be in [1, 20]")
        if self.d_feat_max < 1:
            raise ValueError("d_feat_max must be positive")
        if self.fusion_mode not in ("parallel", "sequential"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape table of every learnable tensor."""
    d = cfg.d_embed
    shapes = {
        "embed.W_X": (d, cfg.d_feat_max),
        "embed.W_Y": (d, cfg.max_classes),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for w in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "mpnn.W_M"] = (d, d)
        shapes[p + "ln.gamma"] = (d,)
        shapes[p + "ln.beta"] = (d,)
        if cfg.fusion_mode == "sequential":
            shapes[p + "ln2.gamma"] = (d,)
            shapes[p + "ln2.beta"] = (d,)
        if cfg.ffn_enabled:
            shapes[p + "ffn.W_1"] = (d, 2 * d)
            shapes[p + "ffn.W_2"] = (2 * d, d)
            shapes[p + "ffn_ln.gamma"] = (d,)
            shapes[p + "ffn_ln.beta"] = (d,)
    shapes["head.W_out"] = (cfg.max_classes, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights; LayerNorm gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            # embed/head weights are (out, in); layer weights are (in, out)
            fan_in = shape[1] if name.startswith(("embed.", "head.")) else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def count_params(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def normalize_adjacency(g: Graph, self_loops: bool = False) -> sparse.csr_matrix:
    """``D^-1/2 A D^-1/2``; isolated nodes get all-zero rows and columns."""
    A = g.adjacency()
    if self_loops:
        A = A + sparse.identity(g.n, format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    D = sparse.diags(inv)
    return (D @ A @ D).tocsr()


def pad_features(X: np.ndarray, d_max: int) -> np.ndarray:
    """Zero-pad to ``d_max`` columns and rescale by ``d_max / d``."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d > d_max:
        raise ValueError(f"feature width {d} exceeds capacity {d_max}; reduce it first")
    if d == 0:
        return np.zeros((n, d_max))
    out = np.zeros((n, d_max))
    out[:, :d] = X * (d_max / d)
    return out


@dataclass
class Batch:
    """Several tasks stacked row-wise; attention never crosses task boundaries."""

    X: np.ndarray
    Y: np.ndarray
    adj: sparse.csr_matrix
    segments: list
    test_rows: np.ndarray
    test_targets: np.ndarray
    test_classes: np.ndarray
    test_weights: np.ndarray
    offsets: np.ndarray
    n_tasks: int


def make_batch(tasks, cfg: ModelConfig, dtype=None, adjacencies=None) -> Batch:
    """Stack tasks into one block-diagonal problem.

    Feature matrices narrower than ``cfg.d_feat_max`` are padded with
    :func:`pad_features`.  Loss weights average over test nodes within a task
    and then over tasks.
    """
    dtype = dtype or nx.get_default_dtype()
    tasks = list(tasks)
    Xs, Ys, adjs, segs = [], [], [], []
    rows, targets, classes, weights, offsets = [], [], [], [], []
    off = 0
    for t_idx, task in enumerate(tasks):
        g = task.graph
        if g.C > cfg.max_classes:
            raise ValueError(f"task has {g.C} classes, model supports {cfg.max_classes}")
        X = g.X if g.X.shape[1] == cfg.d_feat_max else pad_features(g.X, cfg.d_feat_max)
        Y = np.zeros((g.n, cfg.max_classes))
        ytr = g.y[task.train_ids]
        if np.any(ytr < 0) or np.any(ytr >= g.C):
            raise ValueError("train label outside [0, C)")
        Y[task.train_ids, ytr] = 1.0
        Xs.append(X)
        Ys.append(Y)
        adjs.append(adjacencies[t_idx] if adjacencies is not None else normalize_adjacency(g, cfg.self_loops))
        segs.append(AttentionSegment(off, off + g.n, off + task.train_ids))
        m = len(task.test_ids)
        rows.append(off + task.test_ids)
        targets.append(g.y[task.test_ids])
        classes.append(np.full(m, g.C))
        weights.append(np.full(m, 1.0 / (max(m, 1) * len(tasks))))
        offsets.append(off)
        off += g.n
    cat = np.concatenate
    return Batch(
        X=cat(Xs).astype(dtype),
        Y=cat(Ys).astype(dtype),
        adj=sparse.block_diag(adjs, format="csr").astype(dtype) if len(adjs) > 1 else adjs[0].astype(dtype),
        segments=segs,
        test_rows=cat(rows).astype(np.int64),
        test_targets=cat(targets).astype(np.int64),
        test_classes=cat(classes).astype(np.int64),
        test_weights=cat(weights),
        offsets=np.asarray(offsets, dtype=np.int64),
        n_tasks=len(tasks),
    )


def _as_tensors(params: dict) -> dict[str, Tensor]:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}


def embed(X: Tensor, Y: Tensor, params: dict) -> Tensor:
    """``X W_X^T + Y W_Y^T``; test rows carry all-zero ``Y`` rows."""
    return nx.add(X @ params["embed.W_X"].T, Y @ params["embed.W_Y"].T)


def attention_branch(H: Tensor, params: dict, prefix: str, cfg: ModelConfig, segments) -> Tensor:
    q = H @ params[prefix + "attn.W_Q"]
    k = H @ params[prefix + "attn.W_K"]
    v = H @ params[prefix + "attn.W_V"]
    a = nx.context_attention(q, k, v, segments, cfg.n_heads)
    return a @ params[prefix + "attn.W_O"]


def mpnn_branch(H: Tensor, params: dict, prefix: str, adj: sparse.spmatrix) -> Tensor:
    return nx.gelu(nx.spmm(adj, H) @ params[prefix + "mpnn.W_M"])


def dual_branch_layer(
    H: Tensor,
    adj: sparse.spmatrix,
    segments,
    params: dict,
    layer: int,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    p = f"layers.{layer}."
    drop = cfg.dropout if rng is not None else 0.0
    if cfg.fusion_mode == "parallel":
        s = H
        if cfg.attention_enabled:
            s = s + nx.dropout(attention_branch(H, params, p, cfg, segments), drop, rng)
        if cfg.mpnn_enabled:
            s = s + nx.dropout(mpnn_branch(H, params, p, adj), drop, rng)
        H = nx.layer_norm(s, params[p + "ln.gamma"], params[p + "ln.beta"])
    else:
        if cfg.attention_enabled:
            H = H + nx.dropout(attention_branch(H, params, p, cfg, segments), drop, rng)
        H = nx.layer_norm(H, params[p + "ln.gamma"], params[p + "ln.beta"])
        if cfg.mpnn_enabled:
            H = H + nx.dropout(mpnn_branch(H, params, p, adj), drop, rng)
        H = nx.layer_norm(H, params[p + "ln2.gamma"], params[p + "ln2.beta"])
    if cfg.ffn_enabled:
        f = nx.gelu(H @ params[p + "ffn.W_1"]) @ params[p + "ffn.W_2"]
        H = nx.layer_norm(H + f, params[p + "ffn_ln.gamma"], params[p + "ffn_ln.beta"])
    return H


def forward_batch(params: dict, cfg: ModelConfig, batch: Batch, rng=None) -> Tensor:
    """Logits for every test row of the batch, ``(n_test_rows, max_classes)``."""
    params = _as_tensors(params)
    H = embed(Tensor(batch.X), Tensor(batch.Y), params)
    for l in range(cfg.n_layers):
        H = dual_branch_layer(H, batch.adj, batch.segments, params, l, cfg, rng)
    Ht = nx.gather_rows(H, batch.test_rows)
    return Ht @ params["head.W_out"].T


def forward(task: Task, params: dict, cfg: ModelConfig) -> Tensor:
    """Test-node logits of one task, rows ordered like ``task.test_ids``."""
    return forward_batch(params, cfg, make_batch([task], cfg))


def batch_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean over tasks of the per-task mean test cross-entropy."""
    return nx.restricted_cross_entropy(logits, batch.test_targets, batch.test_classes, batch.test_weights)


def predict_proba(task: Task, params: dict, cfg: ModelConfig) -> np.ndarray:
    """PPD over the task's ``C`` classes for each test node."""
    logits = forward(task, params, cfg).data
    m = logits.shape[0]
    return nx.restricted_probs(logits, np.full(m, task.graph.C))[:, : task.graph.C]
