"""Synthetic attributed-graph priors.

Features and labels come from a random structural causal model (a random
layered MLP with dropped edges, driven by Gaussian noise).  Structure comes
from a contextual SBM whose communities are the SCM labels, an Erdos-Renyi
graph, or (ablation only) Barabasi-Albert preferential attachment.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .graph import Graph, Task

ACTIVATIONS = ("tanh", "leaky_relu", "elu", "identity")
MAX_SCM_RETRIES = 10


class PriorSamplingError(RuntimeError):
    """Sampling failed repeatedly on degenerate draws."""


class DegenerateScmError(ValueError):
    """An SCM produced non-finite values or an uninformative label column."""


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class NoisyLogNormal:
    """Discretized log-normal whose log-mean is jittered per draw."""

    mu: float
    sigma: float
    noise: float = 0.1
    low: int = 1
    high: int = 1_000_000

    def sample(self, rng: np.random.Generator) -> int:
        mu = self.mu + self.noise * rng.standard_normal()
        value = int(round(math.exp(mu + self.sigma * rng.standard_normal())))
        return min(max(value, self.low), self.high)


@dataclass
class ScmConfig:
    layers: NoisyLogNormal = field(
        default_factory=lambda: NoisyLogNormal(math.log(3.0), 0.5, 0.1, 2, 8)
    )
    hidden: NoisyLogNormal = field(
        default_factory=lambda: NoisyLogNormal(math.log(16.0), 0.7, 0.1, 2, 128)
    )
    # drop probability ~ scale * Beta(a, b)
    edge_drop_beta: tuple = (1.0, 2.0)
    edge_drop_scale: float = 0.9
    activations: tuple = ACTIVATIONS
    # per-graph noise std ~ LogNormal(noise_mu, noise_sigma); per node jitter on top
    noise_mu: float = math.log(0.1)
    noise_sigma: float = 0.8
    node_noise_sigma: float = 0.3


@dataclass
class CsbmConfig:
    h_range: tuple = (0.1, 0.9)
    p_in_range: tuple = (0.01, 0.1)


@dataclass
class ErConfig:
    p_er_range: tuple = (0.01, 0.05)


@dataclass
class BaConfig:
    attachment_m_range: tuple = (1, 5)
    enabled: bool = False


def _check_range(name, r, lo=-math.inf, hi=math.inf):
    if len(r) != 2 or r[0] > r[1] or r[0] < lo or r[1] > hi:
        raise ValueError(f"invalid range for {name}: {r}")


@dataclass
class PriorConfig:
    n_nodes: int = 1024
    max_classes: int = 20
    min_classes: int = 1
    class_geometric_p: float = 0.08
    feature_dim_range: tuple = (3, 100)
    er_fraction: float = 0.5
    csbm: CsbmConfig = field(default_factory=CsbmConfig)
    er: ErConfig = field(default_factory=ErConfig)
    ba: BaConfig = field(default_factory=BaConfig)
    scm: ScmConfig = field(default_factory=ScmConfig)
    split_fraction_range: tuple = (0.2, 0.8)

    kind = "mixed"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        if not 1 <= self.min_classes <= self.max_classes <= 20:
            raise ValueError("need 1 <= min_classes <= max_classes <= 20")
        if not 0.0 <= self.er_fraction <= 1.0:
            raise ValueError("er_fraction must be a probability")
        if not 0.0 < self.class_geometric_p <= 1.0:
            raise ValueError("class_geometric_p must be in (0, 1]")
        _check_range("feature_dim_range", self.feature_dim_range, 1)
        _check_range("csbm.h_range", self.csbm.h_range, 0.0, 1.0)
        if self.csbm.h_range[0] <= 0.0:
            raise ValueError("csbm.h_range must exclude 0")
        _check_range("csbm.p_in_range", self.csbm.p_in_range, 0.0, 1.0)
        _check_range("er.p_er_range", self.er.p_er_range, 0.0, 1.0)
        _check_range("ba.attachment_m_range", self.ba.attachment_m_range, 1, self.n_nodes - 1)
        _check_range("split_fraction_range", self.split_fraction_range, 0.0, 1.0)
        if not self.scm.activations or any(a not in ACTIVATIONS for a in self.scm.activations):
            raise ValueError(f"activations must be drawn from {ACTIVATIONS}")
        if not 0.0 <= self.scm.edge_drop_scale <= 1.0:
            raise ValueError("edge_drop_scale must be in [0, 1]")

    def sample_task(self, rng: np.random.Generator) -> Task:
        return assemble_task(self, rng)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        d = dict(d)
        d.pop("kind", None)
        scm = dict(d.pop("scm", {}))
        for key in ("layers", "hidden"):
            if key in scm and isinstance(scm[key], dict):
                scm[key] = NoisyLogNormal(**scm[key])
        for key in ("edge_drop_beta", "activations"):
            if key in scm:
                scm[key] = tuple(scm[key])
        csbm = CsbmConfig(**{k: tuple(v) for k, v in d.pop("csbm", {}).items()})
        er = ErConfig(**{k: tuple(v) for k, v in d.pop("er", {}).items()})
        ba_d = dict(d.pop("ba", {}))
        if "attachment_m_range" in ba_d:
            ba_d["attachment_m_range"] = tuple(ba_d["attachment_m_range"])
        for key in ("feature_dim_range", "split_fraction_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(csbm=csbm, er=er, ba=BaConfig(**ba_d), scm=ScmConfig(**scm), **d)


def task_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the stream position ``(seed, *path)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


# --------------------------------------------------------------------------
# Structural causal model
# --------------------------------------------------------------------------


@dataclass
class ScmSpec:
    """A layered random DAG.

    ``masks[l]`` / ``weights[l]`` connect layer ``l`` to ``l + 1`` (shape
    ``sizes[l] x sizes[l+1]``); ``activations[l]`` is applied at layer
    ``l + 1``.  Node ids are global: layer ``l`` occupies
    ``offsets[l]:offsets[l] + sizes[l]``.
    """

    layer_sizes: list
    masks: list
    weights: list
    activations: list
    noise_scales: list
    feature_node_ids: np.ndarray
    label_node_id: int

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.layer_sizes)[:-1]]).astype(np.int64)

    def layer_of(self, node_id: int) -> int:
        return int(np.searchsorted(np.cumsum(self.layer_sizes), node_id, side="right"))


def sample_scm(cfg: PriorConfig, rng: np.random.Generator, n_features: int | None = None) -> ScmSpec:
    """Sample a random layered causal network able to emit ``n_features`` features."""
    scfg = cfg.scm
    if n_features is None:
        lo, hi = cfg.feature_dim_range
        n_features = int(rng.integers(lo, hi + 1))
    n_layers = max(scfg.layers.sample(rng), 2)
    hidden = scfg.hidden.sample(rng)
    # feature nodes live in layers 1..n_layers-1, the label node in the last layer
    hidden = max(hidden, math.ceil(n_features / (n_layers - 1)))
    sizes = [hidden] * (n_layers + 1)

    a, b = scfg.edge_drop_beta
    drop = scfg.edge_drop_scale * rng.beta(a, b) if scfg.edge_drop_scale > 0 else 0.0
    masks, weights, acts = [], [], []
    for l in range(n_layers):
        mask = rng.random((sizes[l], sizes[l + 1])) >= drop
        fan_in = np.maximum(mask.sum(axis=0), 1)
        w = rng.standard_normal((sizes[l], sizes[l + 1])) / np.sqrt(fan_in)[None, :]
        masks.append(mask)
        weights.append(w * mask)
        acts.append(scfg.activations[int(rng.integers(len(scfg.activations)))])

    base = math.exp(scfg.noise_mu + scfg.noise_sigma * rng.standard_normal())
    noise = [np.ones(sizes[0])]
    for l in range(1, n_layers + 1):
        noise.append(base * np.exp(scfg.node_noise_sigma * rng.standard_normal(sizes[l])))

    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    candidates = np.arange(offsets[1], offsets[n_layers])
    feature_ids = np.sort(rng.choice(candidates, size=n_features, replace=False))
    label_id = int(offsets[n_layers] + rng.integers(sizes[n_layers]))
    return ScmSpec(sizes, masks, weights, acts, noise, feature_ids.astype(np.int64), label_id)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "leaky_relu":
        return np.where(z > 0, z, 0.01 * z)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name}")


def propagate_scm(spec: ScmSpec, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Push independent Gaussian noise through the DAG; return all node values.

    Returns an ``(n_samples, total_nodes)`` matrix indexed by global node id.
    """
    values = [rng.standard_normal((n_samples, spec.layer_sizes[0])) * spec.noise_scales[0]]
    for l, (w, act) in enumerate(zip(spec.weights, spec.activations)):
        z = _activate(act, values[-1] @ w)
        z = z + rng.standard_normal(z.shape) * spec.noise_scales[l + 1]
        values.append(z)
    return np.concatenate(values, axis=1)


def standardize_columns(X: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance columns; constant columns become zero."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    out = X - mu
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    out[:, ok] /= sd[ok]
    out[:, ~ok] = 0.0
    return out


def quantile_labels(values: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Rank-bin ``values`` into ``n_classes`` near-equal bins with shuffled bin ids."""
    n = len(values)
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(values, kind="stable")] = np.arange(n)
    bins = ranks * n_classes // n
    return rng.permutation(n_classes)[bins]


def run_scm(
    spec: ScmSpec,
    n_nodes: int,
    n_classes: int,
    n_features: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample node features ``X`` (standardized) and labels ``y`` from ``spec``."""
    if n_features > len(spec.feature_node_ids):
        raise ValueError("spec has fewer feature nodes than requested")
    if n_classes > 20 or n_classes < 1:
        raise ValueError("n_classes must be in [1, 20]")
    with np.errstate(over="ignore", invalid="ignore"):
        values = propagate_scm(spec, n_nodes, rng)
    X = values[:, spec.feature_node_ids[:n_features]]
    target = values[:, spec.label_node_id]
    if not (np.isfinite(X).all() and np.isfinite(target).all()):
        raise DegenerateScmError("non-finite SCM output")
    if n_classes > 1 and len(np.unique(target)) < n_classes:
        raise DegenerateScmError("label node output has too few distinct values")
    y = quantile_labels(target, n_classes, rng) if n_classes > 1 else np.zeros(n_nodes, dtype=np.int64)
    return standardize_columns(X), y


# --------------------------------------------------------------------------
# Graph structure
# --------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def sample_sbm_edges(block_of: np.ndarray, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Include each pair ``i < j`` independently with ``probs[block_i, block_j]``."""
    n = len(block_of)
    i, j = _upper_pairs(n)
    p = probs[block_of[i], block_of[j]]
    keep = rng.random(len(i)) < p
    return np.stack([i[keep], j[keep]], axis=1).astype(np.int64)


def csbm_p_out(p_in: float, h: float) -> float:
    """Inter-community edge probability for homophily parameter ``h``."""
    return p_in * (1.0 - h)


def csbm_block_probs(n_classes: int, h: float, p_in: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric class-by-class edge probability matrix of the contextual SBM.

    Off-diagonal entries are ``Power(5) * p_out``; diagonal entries are
    ``p_out + Power(2) * (p_in - p_out)``.
    """
    p_out = csbm_p_out(p_in, h)
    probs = rng.power(5.0, size=(n_classes, n_classes)) * p_out
    probs = np.triu(probs, 1)
    probs = probs + probs.T
    probs[np.diag_indices(n_classes)] = p_out + rng.power(2.0, size=n_classes) * (p_in - p_out)
    return probs


def sample_csbm_edges(y: np.ndarray, h: float, p_in: float, rng: np.random.Generator, n_classes: int | None = None) -> np.ndarray:
    """Contextual SBM edges with the labels ``y`` as communities."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("labels are empty")
    if not 0.0 < h <= 1.0 or not 0.0 < p_in < 1.0:
        raise ValueError("need h in (0, 1] and p_in in (0, 1)")
    C = int(n_classes if n_classes is not None else y.max() + 1)
    return sample_sbm_edges(y, csbm_block_probs(C, h, p_in, rng), rng)


def sample_er_edges(n: int, p_er: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p_er <= 1.0:
        raise ValueError("p_er must be in [0, 1]")
    i, j = _upper_pairs(n)
    keep = rng.random(len(i)) < p_er
    return np.stack([i[keep], j[keep]], axis=1).astype(np.int64)


def sample_ba_edges(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Preferential attachment grown from a complete graph on ``m + 1`` nodes."""
    if not 1 <= m < n:
        raise ValueError(f"need 1 <= m < n, got m={m}, n={n}")
    edges = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    pool = [v for e in edges for v in e]
    for v in range(m + 1, n):
        chosen: set = set()
        while len(chosen) < m:
            chosen.add(pool[int(rng.integers(len(pool)))])
        for u in sorted(chosen):
            edges.append((u, v))
            pool.extend((u, v))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


# --------------------------------------------------------------------------
# Task assembly
# --------------------------------------------------------------------------


def sample_n_classes(cfg: PriorConfig, rng: np.random.Generator) -> int:
    """Class count with a truncated-geometric tilt toward fewer classes."""
    span = cfg.max_classes - cfg.min_classes
    k = np.arange(span + 1)
    w = cfg.class_geometric_p * (1.0 - cfg.class_geometric_p) ** k
    c = cfg.min_classes + int(rng.choice(span + 1, p=w / w.sum()))
    return max(1, min(c, cfg.n_nodes // 2 if cfg.n_nodes >= 4 else 1))


def split_nodes(
    y: np.ndarray,
    fraction: float,
    rng: np.random.Generator,
    ensure_coverage: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Random train/test partition; optionally make every test class appear in train."""
    n = len(y)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    perm = rng.permutation(n)
    train, test = list(perm[:n_train]), list(perm[n_train:])
    if ensure_coverage:
        for c in np.unique(y[test]):
            if np.any(y[train] == c):
                continue
            t_pos = next(k for k, v in enumerate(test) if y[v] == c)
            counts = np.bincount(y[train], minlength=int(y.max()) + 1)
            donors = [k for k, v in enumerate(train) if counts[y[v]] >= 2]
            if donors:
                k = donors[int(rng.integers(len(donors)))]
                train[k], test[t_pos] = test[t_pos], train[k]
            elif len(test) > 1:
                train.append(test.pop(t_pos))
            else:
                raise PriorSamplingError("cannot cover every test class with the train split")
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def _uniform(rng, r) -> float:
    return float(rng.uniform(r[0], r[1])) if r[1] > r[0] else float(r[0])


def assemble_task(
    cfg: PriorConfig,
    rng: np.random.Generator,
    family: str | None = None,
    h: float | None = None,
) -> Task:
    """Draw one synthetic task: SCM features/labels, random structure, split.

    ``family`` ("er", "csbm", "ba") and ``h`` override the prior's draws;
    the homophily sweep uses them to pin a level.
    """
    n = cfg.n_nodes
    n_classes = sample_n_classes(cfg, rng)
    lo, hi = cfg.feature_dim_range
    n_features = int(rng.integers(lo, hi + 1))
    for _ in range(MAX_SCM_RETRIES):
        spec = sample_scm(cfg, rng, n_features)
        try:
            X, y = run_scm(spec, n, n_classes, n_features, rng)
            break
        except DegenerateScmError:
            continue
    else:
        raise PriorSamplingError(f"SCM degenerate after {MAX_SCM_RETRIES} attempts")

    if family is None:
        if cfg.ba.enabled:
            family = "ba"
        else:
            family = "er" if rng.random() < cfg.er_fraction else "csbm"
    meta: dict = {"family": family}
    if family == "er":
        p_er = _uniform(rng, cfg.er.p_er_range)
        edges = sample_er_edges(n, p_er, rng)
        meta["p_er"] = p_er
    elif family == "csbm":
        h = _uniform(rng, cfg.csbm.h_range) if h is None else float(h)
        p_in = _uniform(rng, cfg.csbm.p_in_range)
        edges = sample_csbm_edges(y, h, p_in, rng, n_classes)
        meta.update(h=h, p_in=p_in)
    elif family == "ba":
        m_lo, m_hi = cfg.ba.attachment_m_range
        m = min(int(rng.integers(m_lo, m_hi + 1)), n - 1)
        edges = sample_ba_edges(n, m, rng)
        meta["m"] = m
    else:
        raise ValueError(f"unknown structure family {family!r}")

    graph = Graph(n, edges, X, y, n_classes)
    frac = _uniform(rng, cfg.split_fraction_range)
    train, test = split_nodes(y, frac, rng)
    return Task(graph, train, test, meta=meta)
