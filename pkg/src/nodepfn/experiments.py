"""Evaluation, homophily sweep and complexity-scaling measurements."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import closed_form_classify, label_propagation, majority_classify
from .graph import Graph, edge_homophily
from .inference import InferenceConfig, load_model, predict
from .model import ModelConfig, attention_branch, init_params, mpnn_branch, normalize_adjacency
from .numerics import AttentionSegment, Tensor
from .priors import PriorConfig, assemble_task, task_rng

METHODS = ("nodepfn", "labelprop", "closed_form:identity", "closed_form:sgc", "closed_form:hgc", "majority")
DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))
STREAM_SWEEP = 4


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("no test nodes to score")
    return float(np.mean(pred == truth))


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def evaluate(checkpoint, g: Graph, train_ids, test_ids, icfg: InferenceConfig | None = None, seeds=(0,)) -> dict:
    """Accuracy mean and population std over ensemble seeds."""
    icfg = icfg or InferenceConfig()
    test_ids = np.asarray(test_ids, dtype=np.int64)
    truth = g.y[test_ids]
    if len(test_ids) == 0 or np.any(truth < 0):
        raise ValueError("evaluation needs a labelled, non-empty test set")
    train_ids = np.asarray(train_ids, dtype=np.int64)
    accs = []
    for s in seeds:
        cfg = InferenceConfig(**{**icfg.to_dict(), "seed": int(s)})
        ppd = predict(g, train_ids, g.y[train_ids], checkpoint, cfg, test_ids=test_ids)
        accs.append(accuracy(ppd.argmax_labels(), truth))
    return {
        "accuracy_mean": float(np.mean(accs)),
        "accuracy_std": float(np.std(accs)),
        "per_seed": [{"seed": int(s), "accuracy": a} for s, a in zip(seeds, accs)],
        "n_test": int(len(test_ids)),
    }


# --------------------------------------------------------------------------
# Homophily sweep
# --------------------------------------------------------------------------


@dataclass
class SweepConfig:
    h_levels: tuple = DEFAULT_LEVELS
    graphs_per_level: int = 20
    seeds: tuple = (0, 1, 2)
    methods: tuple = ("nodepfn", "labelprop", "majority")
    prior: PriorConfig = field(default_factory=lambda: PriorConfig(n_nodes=128, min_classes=2, max_classes=5, feature_dim_range=(3, 16)))
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    labelprop_alpha: float = 0.9
    ridge: float = 1e-4

    def validate(self) -> None:
        if self.graphs_per_level < 1:
            raise ValueError("graphs_per_level must be >= 1")
        if not self.h_levels or any(not 0.0 < h <= 1.0 for h in self.h_levels):
            raise ValueError("h_levels must lie in (0, 1]")
        if not self.seeds:
            raise ValueError("need at least one seed")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")

    def to_dict(self) -> dict:
        return {
            "h_levels": list(self.h_levels),
            "graphs_per_level": self.graphs_per_level,
            "seeds": list(self.seeds),
            "methods": list(self.methods),
            "prior": self.prior.to_dict(),
            "inference": self.inference.to_dict(),
            "labelprop_alpha": self.labelprop_alpha,
            "ridge": self.ridge,
        }


@dataclass
class SweepReport:
    rows: list
    graph_log: list
    config: dict

    def row(self, h: float, method: str) -> dict:
        return next(r for r in self.rows if r["h"] == h and r["method"] == method)

    def accuracy_gap(self, method: str) -> float:
        accs = [r["mean_accuracy"] for r in self.rows if r["method"] == method]
        return max(accs) - min(accs)

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": self.rows}, indent=2, sort_keys=True)

    def plot_table(self) -> str:
        """Tab-separated h x method table of mean accuracies."""
        methods = list(dict.fromkeys(r["method"] for r in self.rows))
        levels = list(dict.fromkeys(r["h"] for r in self.rows))
        lines = ["h\t" + "\t".join(f"{m}\t{m}_std" for m in methods)]
        for h in levels:
            cells = []
            for m in methods:
                r = self.row(h, m)
                cells += [repr(r["mean_accuracy"]), repr(r["std_accuracy"])]
            lines.append(repr(h) + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def graph_log_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.graph_log)


def aggregate(graph_log: list, levels, methods, seeds) -> list:
    """Mean over seeds of per-seed mean accuracy; std across seeds."""
    rows = []
    for h in levels:
        for m in methods:
            per_seed = []
            n_graphs = 0
            for s in seeds:
                accs = [r["accuracy"] for r in graph_log if r["h"] == h and r["method"] == m and r["seed"] == s]
                per_seed.append(float(np.mean(accs)))
                n_graphs += len(accs)
            rows.append(
                {
                    "h": h,
                    "method": m,
                    "mean_accuracy": float(np.mean(per_seed)),
                    "std_accuracy": float(np.std(per_seed)),
                    "n_graphs": n_graphs,
                    "n_seeds": len(seeds),
                }
            )
    return rows


def sweep_task(prior: PriorConfig, seed: int, level: int, index: int, h: float):
    return assemble_task(prior, task_rng(seed, STREAM_SWEEP, level, index), family="csbm", h=h)


def _method_predictions(method: str, task, checkpoint, cfg: SweepConfig, seed: int) -> np.ndarray:
    g = task.graph
    tr, te = task.train_ids, task.test_ids
    ytr = g.y[tr]
    if method == "nodepfn":
        icfg = InferenceConfig(**{**cfg.inference.to_dict(), "seed": int(seed)})
        return predict(g, tr, ytr, checkpoint, icfg, test_ids=te).argmax_labels()
    if method == "labelprop":
        return label_propagation(g, tr, ytr, alpha=cfg.labelprop_alpha, test_ids=te).argmax_labels()
    if method.startswith("closed_form:"):
        return closed_form_classify(g, tr, ytr, method.split(":", 1)[1], cfg.ridge, test_ids=te)
    if method == "majority":
        return majority_classify(ytr, len(te))
    raise ValueError(f"unknown method {method!r}")


def sweep_homophily(checkpoint, cfg: SweepConfig, progress=None) -> SweepReport:
    """Evaluate methods on fresh cSBM tasks at each homophily level.

    Seed ``s`` fixes both the evaluation graphs and the ensemble transforms,
    so the spread across seeds covers task sampling as well.
    """
    cfg.validate()
    if "nodepfn" in cfg.methods and checkpoint is None:
        raise ValueError("method 'nodepfn' needs a checkpoint")
    log = []
    for level, h in enumerate(cfg.h_levels):
        for s in cfg.seeds:
            for i in range(cfg.graphs_per_level):
                task = sweep_task(cfg.prior, s, level, i, h)
                g = task.graph
                hom = edge_homophily(g) if g.n_edges else None
                truth = task.test_labels
                for m in cfg.methods:
                    pred = _method_predictions(m, task, checkpoint, cfg, s)
                    log.append(
                        {
                            "h": h,
                            "seed": int(s),
                            "graph": i,
                            "method": m,
                            "accuracy": accuracy(pred, truth),
                            "n_test": int(len(truth)),
                            "n_classes": g.C,
                            "edge_homophily": hom,
                        }
                    )
            if progress is not None:
                progress(h, s)
    rows = aggregate(log, cfg.h_levels, cfg.methods, cfg.seeds)
    return SweepReport(rows, log, cfg.to_dict())


# --------------------------------------------------------------------------
# Complexity scaling
# --------------------------------------------------------------------------


@dataclass
class ScalingTable:
    branch: str
    rows: list
    exponent: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_tsv(self) -> str:
        lines = ["size\tnodes\tedges\tmedian_seconds"]
        lines += [f"{r['size']}\t{r['nodes']}\t{r['edges']}\t{r['median_seconds']!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


def fit_exponent(sizes, times) -> float:
    """Slope of the least-squares line through ``(log size, log time)``."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def measure_scaling(
    checkpoint,
    sizes,
    branch: str = "attention",
    repeats: int = 5,
    n_nodes: int = 2000,
    d_embed: int | None = None,
    train_fraction: float = 0.5,
    seed: int = 0,
) -> ScalingTable:
    """Median forward time of one layer's attention or message-passing branch.

    ``attention``: ``sizes`` are node counts of edgeless graphs, with
    ``train_fraction`` of the nodes as context.  ``mpnn``: ``sizes`` are edge
    counts of random graphs on ``n_nodes`` nodes.  ``checkpoint`` may be
    None, in which case a fresh model of width ``d_embed`` (default 16) is
    timed.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be non-empty and strictly increasing")
    if branch not in ("attention", "mpnn"):
        raise ValueError("branch must be 'attention' or 'mpnn'")
    if checkpoint is not None:
        params, mcfg = load_model(checkpoint)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    else:
        mcfg = ModelConfig(d_embed=d_embed or 16, n_layers=1, n_heads=4 if (d_embed or 16) % 4 == 0 else 1)
        params = init_params(mcfg, seed=seed)
    tensors = {k: Tensor(v) for k, v in params.items()}
    d = mcfg.d_embed
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        if branch == "attention":
            n = size
            H = Tensor(rng.standard_normal((n, d)))
            keys = np.sort(rng.choice(n, size=max(1, int(round(train_fraction * n))), replace=False))
            segs = [AttentionSegment(0, n, keys)]
            fn = lambda: attention_branch(H, tensors, "layers.0.", mcfg, segs)  # noqa: E731
            edges = 0
        else:
            n = n_nodes
            max_e = n * (n - 1) // 2
            if size > max_e:
                raise ValueError(f"{size} edges do not fit on {n} nodes")
            flat = rng.choice(max_e, size=size, replace=False)
            iu, ju = np.triu_indices(n, k=1)
            g = Graph(n, np.stack([iu[flat], ju[flat]], axis=1), np.zeros((n, 1)), np.zeros(n), 1)
            adj = normalize_adjacency(g)
            H = Tensor(rng.standard_normal((n, d)))
            fn = lambda: mpnn_branch(H, tensors, "layers.0.", adj)  # noqa: E731
            edges = size
        rows.append({"size": size, "nodes": n, "edges": edges, "median_seconds": _median_time(fn, repeats)})
    exponent = fit_exponent(sizes, [r["median_seconds"] for r in rows]) if len(sizes) > 1 else None
    return ScalingTable(branch, rows, exponent)
