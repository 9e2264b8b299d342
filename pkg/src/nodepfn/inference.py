"""Training-free prediction on an arbitrary graph.

Pipeline: canonicalize labels, optionally smooth features over the graph,
optionally reduce them with a truncated SVD, standardize, pad to the model's
feature capacity, then average the class distributions of an ensemble of
feature-transformed forward passes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .graph import Graph, PpdMatrix, Task
from .io import Checkpoint
from .model import ModelConfig, forward_batch, make_batch, normalize_adjacency, pad_features
from .priors import standardize_columns, task_rng

__all__ = [
    "InferenceConfig",
    "SvdError",
    "canonicalize_labels",
    "load_model",
    "member_transform",
    "member_plan",
    "pad_features",
    "predict",
    "smooth_features",
    "truncated_svd",
]

SVD_OVERSAMPLING = 8
SVD_POWER_ITERS = 4
SVD_DENSE_LIMIT = 64
POWER_EXPONENT = 0.9
_MAX_BATCH_ROWS = 4096


class SvdError(RuntimeError):
    """The SVD solver failed to converge."""


@dataclass
class InferenceConfig:
    n_components: int | None = None
    smoothing_steps: int = 0
    ensemble_size: int = 32
    seed: int = 0
    standardize: bool = True
    member_ids: tuple | None = None
    precision: str = "float64"

    def __post_init__(self):
        if self.member_ids is not None:
            self.member_ids = tuple(int(i) for i in self.member_ids)
        self.validate()

    def validate(self, model_cfg: ModelConfig | None = None) -> None:
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.smoothing_steps < 0:
            raise ValueError("smoothing_steps must be >= 0")
        if self.n_components is not None and self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if model_cfg is not None and self.n_components is not None and self.n_components > model_cfg.d_feat_max:
            raise ValueError(f"n_components {self.n_components} exceeds feature capacity {model_cfg.d_feat_max}")
        if self.member_ids is not None and (not self.member_ids or min(self.member_ids) < 0):
            raise ValueError("member_ids must be non-empty and non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def members(self) -> tuple:
        return self.member_ids if self.member_ids is not None else tuple(range(self.ensemble_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["member_ids"] = list(self.member_ids) if self.member_ids is not None else None
        return d


def load_model(checkpoint) -> tuple[dict, ModelConfig]:
    """Accept a :class:`Checkpoint` or a ``(params, ModelConfig)`` pair."""
    if isinstance(checkpoint, Checkpoint):
        return checkpoint.params, ModelConfig.from_dict(checkpoint.model_config)
    params, cfg = checkpoint
    return params, cfg


# --------------------------------------------------------------------------
# Feature preprocessing
# --------------------------------------------------------------------------


def _fix_signs(U: np.ndarray, S: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs * S


def truncated_svd(X: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Rank-``k`` projection ``U_k diag(S_k)`` with a deterministic sign convention.

    Each returned column is flipped so the largest-magnitude entry of its
    left singular vector is positive.  Small problems use a dense SVD;
    larger ones use randomized subspace iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} must be in [1, min(n, d)={min(n, d)}]")
    try:
        if min(n, d) <= SVD_DENSE_LIMIT:
            U, S, _ = np.linalg.svd(X, full_matrices=False)
            return _fix_signs(U[:, :k], S[:k])
        rng = np.random.default_rng(seed)
        width = min(k + SVD_OVERSAMPLING, min(n, d))
        Q, _ = np.linalg.qr(X @ rng.standard_normal((d, width)))
        for _ in range(SVD_POWER_ITERS):
            Z, _ = np.linalg.qr(X.T @ Q)
            Q, _ = np.linalg.qr(X @ Z)
        Ub, S, _ = np.linalg.svd(Q.T @ X, full_matrices=False)
        return _fix_signs((Q @ Ub)[:, :k], S[:k])
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge: {exc}") from exc


def smooth_features(X: np.ndarray, g: Graph, steps: int) -> np.ndarray:
    """Apply ``X <- X + A X`` ``steps`` times, then re-standardize the columns."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    out = np.asarray(X, dtype=np.float64)
    if steps:
        A = g.adjacency()
        for _ in range(steps):
            out = out + A @ out
    return standardize_columns(out)


def canonicalize_labels(train_labels) -> tuple[np.ndarray, np.ndarray]:
    """Map labels to ``0..C-1`` by order of first appearance.

    Returns ``(canonical_labels, classes)`` with ``classes[c]`` the original
    label of canonical class ``c``.
    """
    labels = np.asarray(train_labels, dtype=np.int64)
    classes, first = np.unique(labels, return_index=True)
    order = np.argsort(first, kind="stable")
    classes = classes[order]
    lookup = {int(c): i for i, c in enumerate(classes)}
    return np.array([lookup[int(v)] for v in labels], dtype=np.int64), classes


# --------------------------------------------------------------------------
# Ensemble members
# --------------------------------------------------------------------------


def member_plan(d: int, seed: int, member: int) -> tuple[np.ndarray, bool]:
    """Column permutation and power-transform flag of ensemble member ``member``.

    Member 0 is the untouched input.  Every other member permutes the
    feature columns with its own generator; odd members also apply
    ``sign(x) |x|^0.9``.
    """
    if member == 0:
        return np.arange(d), False
    perm = task_rng(seed, member).permutation(d)
    return perm, member % 2 == 1


def member_transform(X: np.ndarray, perm: np.ndarray, power: bool) -> np.ndarray:
    out = X[:, perm]
    if power:
        out = np.sign(out) * np.abs(out) ** POWER_EXPONENT
    return out


# --------------------------------------------------------------------------
# Prediction
# --------------------------------------------------------------------------


def prepare_features(g: Graph, icfg: InferenceConfig, model_cfg: ModelConfig) -> np.ndarray:
    """Smoothing, SVD reduction and standardization, before member transforms."""
    X = g.X
    if icfg.smoothing_steps:
        X = smooth_features(X, g, icfg.smoothing_steps)
    if icfg.n_components is not None:
        k = min(icfg.n_components, *X.shape)
        X = truncated_svd(X, k, seed=icfg.seed)
    elif X.shape[1] > model_cfg.d_feat_max:
        raise ValueError(
            f"feature width {X.shape[1]} exceeds capacity {model_cfg.d_feat_max}; set n_components"
        )
    if icfg.standardize:
        X = standardize_columns(X)
    return X


def predict(
    g: Graph,
    train_ids,
    train_labels,
    checkpoint,
    icfg: InferenceConfig | None = None,
    test_ids=None,
) -> PpdMatrix:
    """Posterior predictive class distribution for every test node.

    ``test_ids`` defaults to all nodes outside ``train_ids``.  The model and
    its parameters are never modified.
    """
    icfg = icfg or InferenceConfig()
    params, model_cfg = load_model(checkpoint)
    icfg.validate(model_cfg)
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if len(train_ids) == 0:
        raise ValueError("train_ids must be non-empty")
    if test_ids is None:
        test_ids = np.setdiff1d(np.arange(g.n), train_ids)
    test_ids = np.asarray(test_ids, dtype=np.int64)
    canon, classes = canonicalize_labels(train_labels)
    if len(canon) != len(train_ids):
        raise ValueError("train_ids and train_labels differ in length")
    C = len(classes)
    if C > model_cfg.max_classes:
        raise ValueError(f"{C} distinct labels exceed the model's {model_cfg.max_classes} classes")
    if C == 1:
        return PpdMatrix(np.ones((len(test_ids), 1)), classes, test_ids)
    if len(test_ids) == 0:
        return PpdMatrix(np.zeros((0, C)), classes, test_ids)

    X = prepare_features(g, icfg, model_cfg)
    y = np.zeros(g.n, dtype=np.int64)
    y[train_ids] = canon
    adj = normalize_adjacency(g, model_cfg.self_loops)
    dtype = np.dtype(icfg.precision).type
    cast = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}

    tasks = []
    for member in icfg.members:
        perm, power = member_plan(X.shape[1], icfg.seed, member)
        Xm = pad_features(member_transform(X, perm, power), model_cfg.d_feat_max)
        tasks.append(Task(Graph(g.n, g.edges, Xm, y, C), train_ids, test_ids))

    per_chunk = max(1, _MAX_BATCH_ROWS // g.n)
    total = np.zeros((len(test_ids), C))
    m = len(test_ids)
    for lo in range(0, len(tasks), per_chunk):
        part = tasks[lo : lo + per_chunk]
        batch = make_batch(part, model_cfg, dtype=dtype, adjacencies=[adj] * len(part))
        logits = forward_batch(cast, model_cfg, batch).data.astype(np.float64)
        probs = nx.restricted_probs(logits, np.full(len(logits), C))[:, :C]
        for j in range(len(part)):
            total += probs[j * m : (j + 1) * m]
    probs = total / len(tasks)
    probs /= probs.sum(axis=1, keepdims=True)
    return PpdMatrix(probs, classes, test_ids)
