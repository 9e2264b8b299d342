"""Training-free baselines and an exact posterior-predictive oracle.

The oracle works on tiny tasks drawn from a finite set of contextual-SBM
hypotheses with Gaussian class-conditional features.  It enumerates every
labelling of the test nodes, so its predictive distribution is the exact
Bayes posterior given all features, all edges and the train labels.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .graph import Graph, PpdMatrix, Task
from .model import normalize_adjacency
from .priors import task_rng

FILTERS = ("identity", "sgc", "hgc")
MAX_ENUMERATION = 1 << 20
TIE_RTOL = 1e-9  # relative score gap treated as a tie


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations are singular; increase the ridge."""


def _classes_for(train_labels, n_classes: int | None) -> np.ndarray:
    if n_classes is not None:
        return np.arange(n_classes, dtype=np.int64)
    return np.unique(np.asarray(train_labels, dtype=np.int64))


def _one_hot(train_labels, classes: np.ndarray) -> np.ndarray:
    labels = np.asarray(train_labels, dtype=np.int64)
    idx = np.searchsorted(classes, labels)
    if np.any(idx >= len(classes)) or np.any(classes[np.minimum(idx, len(classes) - 1)] != labels):
        raise ValueError("train label outside the class set")
    Y = np.zeros((len(labels), len(classes)))
    Y[np.arange(len(labels)), idx] = 1.0
    return Y


def _default_test(g: Graph, train_ids, test_ids) -> np.ndarray:
    if test_ids is None:
        return np.setdiff1d(np.arange(g.n), train_ids)
    return np.asarray(test_ids, dtype=np.int64)


# --------------------------------------------------------------------------
# Label propagation
# --------------------------------------------------------------------------


def label_propagation(
    g: Graph,
    train_ids,
    train_labels,
    alpha: float = 0.9,
    iters: int = 100,
    n_classes: int | None = None,
    test_ids=None,
) -> PpdMatrix:
    """Iterate ``F <- alpha * A_norm F + (1 - alpha) Y`` with train rows clamped.

    Rows that receive no mass (unreachable nodes, or ``alpha == 0``) become
    uniform.  ``alpha == 0`` is accepted as the no-propagation limit.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    train_ids = np.asarray(train_ids, dtype=np.int64)
    classes = _classes_for(train_labels, n_classes)
    Y = np.zeros((g.n, len(classes)))
    Y[train_ids] = _one_hot(train_labels, classes)
    A = normalize_adjacency(g)
    F = Y.copy()
    for _ in range(iters):
        F = alpha * (A @ F) + (1.0 - alpha) * Y
        F[train_ids] = Y[train_ids]
    test_ids = _default_test(g, train_ids, test_ids)
    P = F[test_ids]
    s = P.sum(axis=1, keepdims=True)
    empty = s[:, 0] <= 0
    P = np.where(empty[:, None], 1.0 / len(classes), P / np.where(s > 0, s, 1.0))
    return PpdMatrix(P, classes, test_ids)


# --------------------------------------------------------------------------
# Closed-form (pseudo-inverse) classifiers
# --------------------------------------------------------------------------


def propagation_matrix(g: Graph) -> sparse.csr_matrix:
    """Symmetric-normalized adjacency with self-loops."""
    return normalize_adjacency(g, self_loops=True)


def apply_filter(g: Graph, name: str = "identity", k: int = 2) -> np.ndarray:
    """Filtered features: ``X``, ``A^k X`` (low-pass) or ``(I - A) X`` (high-pass)."""
    X = g.X
    if name == "identity":
        return X.copy()
    A = propagation_matrix(g)
    if name == "sgc":
        F = X
        for _ in range(k):
            F = A @ F
        return np.asarray(F)
    if name == "hgc":
        return X - A @ X
    raise ValueError(f"unknown filter {name!r}; choose from {FILTERS}")


def closed_form_scores(
    g: Graph,
    train_ids,
    train_labels,
    filter: str = "identity",
    ridge: float = 1e-4,
    k: int = 2,
    pinv: bool = False,
    n_classes: int | None = None,
    test_ids=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ridge regression on one-hot labels; returns ``(scores, classes, test_ids)``."""
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    train_ids = np.asarray(train_ids, dtype=np.int64)
    classes = _classes_for(train_labels, n_classes)
    Y = _one_hot(train_labels, classes)
    F = apply_filter(g, filter, k)
    Ft = F[train_ids]
    if pinv:
        W = np.linalg.pinv(Ft) @ Y
    else:
        G = Ft.T @ Ft + ridge * np.eye(F.shape[1])
        if ridge == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
            raise SingularSystemError("normal equations are singular; increase ridge or use pinv")
        try:
            W = np.linalg.solve(G, Ft.T @ Y)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"{exc}; increase ridge") from exc
    test_ids = _default_test(g, train_ids, test_ids)
    return F[test_ids] @ W, classes, test_ids


def closed_form_classify(g: Graph, train_ids, train_labels, filter: str = "identity", ridge: float = 1e-4, **kw) -> np.ndarray:
    """Predicted labels for the test nodes; ties go to the smaller class index.

    Scores within rounding error of the row maximum count as tied, so a filter
    that annihilates the features (in exact arithmetic) predicts class 0.
    """
    scores, classes, _ = closed_form_scores(g, train_ids, train_labels, filter, ridge, **kw)
    return classes[tied_argmax(scores)]


def tied_argmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax that resolves near-ties toward the smaller column."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    top = scores.max(axis=1, keepdims=True)
    tol = TIE_RTOL * np.maximum(np.abs(scores).max(axis=1, keepdims=True), 1.0)
    return np.argmax(scores >= top - tol, axis=1)


def majority_classify(train_labels, n_test: int) -> np.ndarray:
    """Most frequent train label (smallest on ties) for every test node."""
    vals, counts = np.unique(np.asarray(train_labels, dtype=np.int64), return_counts=True)
    return np.full(n_test, vals[np.argmax(counts)], dtype=np.int64)


# --------------------------------------------------------------------------
# Exact oracle
# --------------------------------------------------------------------------


@dataclass
class CsbmHypothesis:
    """Labels iid from ``class_prior``; 1-D features ``N(mu[y], sigma^2)``.

    Edges are independent with probability ``p_in`` within a class and
    ``p_in * (1 - h)`` across classes.
    """

    h: float
    p_in: float
    class_prior: tuple = (0.5, 0.5)
    mu: tuple = (-0.5, 0.5)
    sigma: float = 1.0

    def __post_init__(self):
        self.class_prior = tuple(float(p) for p in self.class_prior)
        self.mu = tuple(float(m) for m in self.mu)
        if len(self.mu) != len(self.class_prior):
            raise ValueError("mu and class_prior must have one entry per class")
        if not math.isclose(sum(self.class_prior), 1.0, abs_tol=1e-12) or min(self.class_prior) <= 0:
            raise ValueError("class_prior must be positive and sum to 1")
        if not (0.0 < self.p_in < 1.0 and 0.0 <= self.h <= 1.0 and self.sigma > 0):
            raise ValueError("need 0 < p_in < 1, 0 <= h <= 1, sigma > 0")

    @property
    def n_classes(self) -> int:
        return len(self.class_prior)

    def block_probs(self) -> np.ndarray:
        C = self.n_classes
        p_out = self.p_in * (1.0 - self.h)
        return np.full((C, C), p_out) + (self.p_in - p_out) * np.eye(C)

    def feature_loglik(self, x: np.ndarray) -> np.ndarray:
        """``(n, C)`` log densities of the scalar features."""
        z = (np.asarray(x, dtype=np.float64).reshape(-1, 1) - np.asarray(self.mu)[None, :]) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - 0.5 * math.log(2 * math.pi)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        y = rng.choice(self.n_classes, size=n, p=self.class_prior)
        x = np.asarray(self.mu)[y] + self.sigma * rng.standard_normal(n)
        i, j = np.triu_indices(n, k=1)
        keep = rng.random(len(i)) < self.block_probs()[y[i], y[j]]
        return x, y, np.stack([i[keep], j[keep]], axis=1)


@dataclass
class HypothesisSet:
    hypotheses: list
    weights: np.ndarray = None

    def __post_init__(self):
        if not self.hypotheses:
            raise ValueError("need at least one hypothesis")
        w = np.ones(len(self.hypotheses)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.hypotheses),) or np.any(w <= 0) or not np.isfinite(w).all():
            raise ValueError("weights must be positive, one per hypothesis")
        self.weights = w / w.sum()
        if len({hy.n_classes for hy in self.hypotheses}) != 1:
            raise ValueError("hypotheses must agree on the number of classes")

    @property
    def n_classes(self) -> int:
        return self.hypotheses[0].n_classes


def _unpack(task):
    if isinstance(task, Task):
        return task.graph, task.train_ids, task.test_ids
    g, train_ids, test_ids = task
    return g, np.asarray(train_ids, dtype=np.int64), np.asarray(test_ids, dtype=np.int64)


def _log_joint(hyp: CsbmHypothesis, g: Graph, Yall: np.ndarray, adj_upper: np.ndarray, pairs) -> np.ndarray:
    """Log ``p(y, x, A | hyp)`` for every row of the labelling matrix ``Yall``."""
    lp = np.log(np.asarray(hyp.class_prior))[Yall].sum(axis=1)
    fl = hyp.feature_loglik(g.X[:, 0])
    lp = lp + fl[np.arange(g.n)[None, :], Yall].sum(axis=1)
    i, j = pairs
    P = hyp.block_probs()
    with np.errstate(divide="ignore"):
        lpe = np.where(adj_upper[None, :], np.log(P[Yall[:, i], Yall[:, j]]), np.log1p(-P[Yall[:, i], Yall[:, j]]))
    return lp + lpe.sum(axis=1)


def _adjacency_upper(g: Graph):
    i, j = np.triu_indices(g.n, k=1)
    A = np.zeros((g.n, g.n), dtype=bool)
    A[g.edges[:, 0], g.edges[:, 1]] = True
    return A[i, j], (i, j)


def exact_ppd(task, hyps: HypothesisSet) -> PpdMatrix:
    """Exact posterior predictive of every test label under ``hyps``.

    ``task`` is a :class:`Task` or a ``(graph, train_ids, test_ids)`` triple
    (the triple may have an empty train split).  Graph features must be
    one-dimensional.
    """
    g, train_ids, test_ids = _unpack(task)
    if g.d != 1:
        raise ValueError("oracle hypotheses model one-dimensional features")
    C = hyps.n_classes
    m = len(test_ids)
    if C**m > MAX_ENUMERATION:
        raise ValueError(f"{C}^{m} test labellings is too many to enumerate")
    labellings = np.array(list(itertools.product(range(C), repeat=m)), dtype=np.int64).reshape(-1, m)
    Yall = np.zeros((len(labellings), g.n), dtype=np.int64)
    Yall[:, train_ids] = g.y[train_ids]
    Yall[:, test_ids] = labellings
    adj_upper, pairs = _adjacency_upper(g)
    logw = np.stack(
        [math.log(w) + _log_joint(hyp, g, Yall, adj_upper, pairs) for hyp, w in zip(hyps.hypotheses, hyps.weights)]
    )
    if np.all(np.isneginf(logw)):
        raise FloatingPointError("every hypothesis has zero likelihood for this task")
    post = np.exp(logw - logsumexp(logw)).sum(axis=0)
    probs = np.zeros((m, C))
    for c in range(C):
        probs[:, c] = post @ (labellings == c)
    probs /= probs.sum(axis=1, keepdims=True)
    return PpdMatrix(probs, np.arange(C), test_ids)


def monte_carlo_ppd(task, hyps: HypothesisSet, n_samples: int = 1_000_000, seed: int = 0, chunk: int = 100_000) -> PpdMatrix:
    """Importance-sampling estimate of :func:`exact_ppd`.

    Hypotheses and test labels are drawn from the prior and weighted by the
    likelihood of the observed train labels, features and edges.
    """
    g, train_ids, test_ids = _unpack(task)
    rng = np.random.default_rng(seed)
    C = hyps.n_classes
    m = len(test_ids)
    adj_upper, pairs = _adjacency_upper(g)
    logw_all, labels_all = [], []
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        which = rng.choice(len(hyps.hypotheses), size=b, p=hyps.weights)
        Yall = np.zeros((b, g.n), dtype=np.int64)
        Yall[:, train_ids] = g.y[train_ids]
        lw = np.empty(b)
        for h_idx, hyp in enumerate(hyps.hypotheses):
            rows = np.flatnonzero(which == h_idx)
            Yall[np.ix_(rows, test_ids)] = rng.choice(C, size=(len(rows), m), p=hyp.class_prior)
            # drop the proposal density of the test labels from the joint
            lj = _log_joint(hyp, g, Yall[rows], adj_upper, pairs)
            lj -= np.log(np.asarray(hyp.class_prior))[Yall[np.ix_(rows, test_ids)]].sum(axis=1)
            lw[rows] = lj
        logw_all.append(lw)
        labels_all.append(Yall[:, test_ids])
        done += b
    lw = np.concatenate(logw_all)
    labels = np.concatenate(labels_all)
    w = np.exp(lw - lw.max())
    probs = np.stack([w @ (labels == c) for c in range(C)], axis=1) / w.sum()
    return PpdMatrix(probs, np.arange(C), test_ids)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise total-variation distance."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


@dataclass
class OraclePrior:
    """Task sampler for a finite cSBM hypothesis set (tiny enumerable tasks)."""

    hyps: HypothesisSet = field(
        default_factory=lambda: HypothesisSet([CsbmHypothesis(h=0.1, p_in=0.6), CsbmHypothesis(h=0.9, p_in=0.6)])
    )
    n_nodes: int = 10
    train_fraction_range: tuple = (0.2, 0.8)

    kind = "oracle"

    def sample_task(self, rng: np.random.Generator) -> Task:
        k = int(rng.choice(len(self.hyps.hypotheses), p=self.hyps.weights))
        hyp = self.hyps.hypotheses[k]
        x, y, edges = hyp.sample(self.n_nodes, rng)
        graph = Graph(self.n_nodes, edges, x[:, None], y, hyp.n_classes)
        frac = rng.uniform(*self.train_fraction_range)
        n_train = min(max(int(round(frac * self.n_nodes)), 1), self.n_nodes - 1)
        perm = rng.permutation(self.n_nodes)
        return Task(graph, np.sort(perm[:n_train]), np.sort(perm[n_train:]), meta={"hypothesis": k, "h": hyp.h})

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_nodes": self.n_nodes,
            "train_fraction_range": list(self.train_fraction_range),
            "weights": self.hyps.weights.tolist(),
            "hypotheses": [
                {"h": h.h, "p_in": h.p_in, "class_prior": list(h.class_prior), "mu": list(h.mu), "sigma": h.sigma}
                for h in self.hyps.hypotheses
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OraclePrior":
        hyps = HypothesisSet([CsbmHypothesis(**h) for h in d["hypotheses"]], np.asarray(d["weights"]))
        return cls(hyps, int(d["n_nodes"]), tuple(d["train_fraction_range"]))


def held_out_tasks(prior, seed: int, count: int, stream: int = 3) -> list[Task]:
    """Tasks from a stream branch that training never touches."""
    return [prior.sample_task(task_rng(seed, stream, i)) for i in range(count)]
