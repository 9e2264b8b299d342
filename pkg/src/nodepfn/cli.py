"""Command-line entry point: ``nodepfn <command> [options]``.

Settings are resolved as command-line flags > JSON config file > built-in
defaults, and the merged result is written into every output artifact.
Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import OraclePrior, closed_form_scores, label_propagation, majority_classify, tied_argmax
from .graph import PpdMatrix
from .inference import InferenceConfig, SvdError, predict
from .io import FormatError, atomic_write, load_checkpoint, read_dataset, save_checkpoint, save_dataset
from .model import ModelConfig, count_params
from .numerics import NonFiniteError
from .priors import PriorConfig, PriorSamplingError, assemble_task, task_rng
from .training import NumericalError, TrainConfig, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
STREAM_GENERATE = 5

log = logging.getLogger("nodepfn")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path, obj) -> None:
    atomic_write(path, _dump(obj).encode("utf-8"))


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return cfg


def _merge(defaults: dict, file_section: dict | None, flags: dict) -> dict:
    out = dict(defaults)
    for k, v in (file_section or {}).items():
        if k not in out:
            raise ValueError(f"unknown config key {k!r}")
        out[k] = v
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _nested_update(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _nested_update(out[k], v)
        else:
            out[k] = v
    return out


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


# --------------------------------------------------------------------------
# Config assembly
# --------------------------------------------------------------------------


def prior_from(file_cfg: dict, args) -> object:
    section = dict(file_cfg.get("prior", {}))
    kind = getattr(args, "prior", None) or section.pop("kind", "mixed")
    section.pop("kind", None)
    if kind == "oracle":
        return OraclePrior.from_dict({**OraclePrior().to_dict(), **section}) if section else OraclePrior()
    if kind != "mixed":
        raise ValueError(f"unknown prior kind {kind!r}")
    flags = {
        "n_nodes": getattr(args, "n_nodes", None),
        "max_classes": getattr(args, "max_classes", None),
        "min_classes": getattr(args, "min_classes", None),
        "er_fraction": 1.0 if getattr(args, "er_only", False) else getattr(args, "er_fraction", None),
    }
    base = PriorConfig().to_dict()
    base.pop("kind")
    merged = _nested_update(base, section)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return PriorConfig.from_dict(merged)


def model_from(file_cfg: dict, args) -> ModelConfig:
    flags = {
        "d_embed": args.d_embed,
        "n_layers": args.layers,
        "n_heads": args.heads,
        "d_feat_max": args.d_feat_max,
        "max_classes": args.model_classes,
        "fusion_mode": args.fusion,
        "mpnn_enabled": False if args.no_mpnn else None,
    }
    return ModelConfig(**_merge(ModelConfig().to_dict(), file_cfg.get("model"), flags))


def train_from(file_cfg: dict, args) -> TrainConfig:
    flags = {
        "epochs": args.epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "lr_schedule": args.schedule,
        "seed": args.seed,
        "checkpoint_every": args.checkpoint_every,
        "precision": args.precision,
        "val_every": args.val_every,
        "val_pool_size": args.val_pool_size,
    }
    return TrainConfig(**_merge(TrainConfig().to_dict(), file_cfg.get("train"), flags))


def inference_from(file_cfg: dict, args) -> InferenceConfig:
    flags = {
        "n_components": args.components,
        "smoothing_steps": args.smoothing_steps,
        "ensemble_size": args.ensemble,
        "seed": getattr(args, "seed", None),
    }
    merged = _merge(InferenceConfig().to_dict(), file_cfg.get("inference"), flags)
    return InferenceConfig(**merged)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate_priors(args) -> int:
    file_cfg = _load_config(args.config)
    prior = prior_from(file_cfg, args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    for i in range(args.count):
        rng = task_rng(seed, STREAM_GENERATE, i)
        if args.family is not None or args.h is not None:
            if not isinstance(prior, PriorConfig):
                raise ValueError("--family/--h apply to the mixed prior only")
            task = assemble_task(prior, rng, family=args.family or "csbm", h=args.h)
        else:
            task = prior.sample_task(rng)
        meta = {"prior": prior.to_dict(), "seed": seed, "index": i, "task": task.meta}
        save_dataset(out / f"task_{i:05d}.npfn", task.graph, task.train_ids, task.test_ids, meta=meta)
    print(f"wrote {args.count} tasks to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    prior = prior_from(file_cfg, args)
    mcfg = model_from(file_cfg, args)
    tcfg = train_from(file_cfg, args)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        mcfg = ModelConfig.from_dict(resume.model_config)
    result = train(
        prior,
        mcfg,
        tcfg,
        resume=resume,
        checkpoint_dir=args.checkpoint_dir,
        metrics_path=args.metrics,
        stop_after=args.stop_after,
    )
    save_checkpoint(args.out, result.checkpoint)
    losses = result.losses
    tail = float(np.mean(losses[-min(len(losses), 50):])) if losses else float("nan")
    print(f"trained {len(losses)} steps; recent mean loss {tail!r}; checkpoint {args.out}")
    return EXIT_OK


def _ppd_output(args, ds, ppd: PpdMatrix, meta: dict) -> None:
    meta = {**ds.meta, **meta}
    save_dataset(args.out, ds.graph, ds.train_ids, ds.test_ids, predictions=ppd, meta=meta)


def cmd_predict(args) -> int:
    file_cfg = _load_config(args.config)
    icfg = inference_from(file_cfg, args)
    ck = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    g = ds.graph
    ppd = predict(g, ds.train_ids, g.y[ds.train_ids], ck, icfg, test_ids=ds.test_ids)
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    _ppd_output(args, ds, ppd, {"predict": {"inference": icfg.to_dict(), "checkpoint_sha256": digest}})
    print(f"wrote {len(ppd.node_ids)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiments import evaluate

    file_cfg = _load_config(args.config)
    icfg = inference_from(file_cfg, args)
    ck = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    seeds = _ints(args.seeds)
    record = evaluate(ck, ds.graph, ds.train_ids, ds.test_ids, icfg, seeds)
    record["config"] = {"inference": icfg.to_dict(), "seeds": seeds, "dataset": str(args.dataset)}
    text = _dump(record)
    if args.out:
        atomic_write(args.out, text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_baseline(args) -> int:
    ds = read_dataset(args.dataset)
    g = ds.graph
    tr, te = ds.train_ids, ds.test_ids
    ytr = g.y[tr]
    params = {"method": args.method}
    if args.method == "labelprop":
        ppd = label_propagation(g, tr, ytr, alpha=args.alpha, iters=args.iters, n_classes=g.C, test_ids=te)
        params.update(alpha=args.alpha, iters=args.iters)
    elif args.method == "closed-form":
        scores, classes, _ = closed_form_scores(
            g, tr, ytr, args.filter, args.ridge, k=args.k, pinv=args.pinv, n_classes=g.C, test_ids=te
        )
        # hard decisions are reported as one-hot rows
        probs = np.zeros_like(scores)
        if len(te):
            probs[np.arange(len(te)), tied_argmax(scores)] = 1.0
        ppd = PpdMatrix(probs, classes, te)
        params.update(filter=args.filter, ridge=args.ridge, k=args.k, pinv=args.pinv)
    else:
        labels = majority_classify(ytr, len(te))
        probs = np.zeros((len(te), g.C))
        probs[np.arange(len(te)), labels] = 1.0
        ppd = PpdMatrix(probs, np.arange(g.C), te)
    _ppd_output(args, ds, ppd, {"baseline": params})
    if len(te) and np.all(g.y[te] >= 0):
        acc = float(np.mean(ppd.argmax_labels() == g.y[te]))
        print(f"{args.method} accuracy {acc!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiments import SweepConfig, sweep_homophily

    file_cfg = _load_config(args.config)
    section = dict(file_cfg.get("sweep", {}))
    cfg = SweepConfig()
    if "prior" in file_cfg:
        cfg.prior = prior_from(file_cfg, args)
    elif args.n_nodes is not None:
        cfg.prior = PriorConfig.from_dict({**cfg.prior.to_dict(), "n_nodes": args.n_nodes})
    for key in ("h_levels", "seeds", "methods"):
        if key in section:
            setattr(cfg, key, tuple(section.pop(key)))
    for key, value in section.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown sweep key {key!r}")
        setattr(cfg, key, value)
    if args.levels:
        cfg.h_levels = tuple(_floats(args.levels))
    if args.graphs_per_level is not None:
        cfg.graphs_per_level = args.graphs_per_level
    if args.seeds:
        cfg.seeds = tuple(_ints(args.seeds))
    if args.methods:
        cfg.methods = tuple(args.methods.replace(",", " ").split())
    cfg.inference = inference_from(file_cfg, args)
    ck = None
    if "nodepfn" in cfg.methods:
        if not args.checkpoint:
            raise ValueError("method 'nodepfn' needs --checkpoint")
        ck = load_checkpoint(args.checkpoint)
    report = sweep_homophily(ck, cfg, progress=lambda h, s: log.info("h=%s seed=%s done", h, s))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "report.json", report.to_json().encode("utf-8"))
    atomic_write(out / "plot.tsv", report.plot_table().encode("utf-8"))
    atomic_write(out / "graphs.jsonl", report.graph_log_jsonl().encode("utf-8"))
    sys.stdout.write(report.plot_table())
    return EXIT_OK


def cmd_scaling(args) -> int:
    from .experiments import measure_scaling

    ck = load_checkpoint(args.checkpoint) if args.checkpoint else None
    table = measure_scaling(
        ck, _ints(args.sizes), args.branch, repeats=args.repeats, n_nodes=args.n_nodes, d_embed=args.d_embed
    )
    if args.out:
        _write_json(args.out, table.to_dict())
    sys.stdout.write(table.to_tsv())
    if table.exponent is not None:
        print(f"fitted exponent {table.exponent!r}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    summary = {
        "model_config": ck.model_config,
        "n_parameters": count_params(ck.params),
        "tensors": {k: list(v.shape) for k, v in ck.params.items()},
        "dtype": str(next(iter(ck.params.values())).dtype) if ck.params else None,
        "has_optimizer_state": ck.has_optimizer,
        "optimizer_step": ck.opt_step,
        "skipped_steps": ck.opt_skipped,
        "position": {
            "epoch": ck.epoch,
            "step_in_epoch": ck.step_in_epoch,
            "global_step": ck.global_step,
            "seed": ck.seed,
        },
        "meta": ck.meta,
    }
    sys.stdout.write(_dump(summary))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_inference_flags(p) -> None:
    p.add_argument("--components", type=int, help="truncated-SVD target width")
    p.add_argument("--smoothing-steps", type=int)
    p.add_argument("--ensemble", type=int, help="ensemble size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodepfn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-priors", help="sample synthetic tasks into dataset files")
    p.add_argument("--config")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prior", choices=("mixed", "oracle"))
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--min-classes", type=int)
    p.add_argument("--max-classes", type=int)
    p.add_argument("--er-fraction", type=float)
    p.add_argument("--er-only", action="store_true")
    p.add_argument("--family", choices=("er", "csbm", "ba"))
    p.add_argument("--h", type=float, help="pin the cSBM homophily parameter")
    p.set_defaults(func=cmd_generate_priors)

    p = sub.add_parser("train", help="pre-train on synthetic tasks")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--resume")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--metrics", help="JSON-lines metrics log")
    p.add_argument("--stop-after", type=int, help="stop at this global step")
    p.add_argument("--prior", choices=("mixed", "oracle"))
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--min-classes", type=int)
    p.add_argument("--max-classes", type=int)
    p.add_argument("--er-fraction", type=float)
    p.add_argument("--er-only", action="store_true")
    p.add_argument("--d-embed", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-feat-max", type=int)
    p.add_argument("--model-classes", type=int)
    p.add_argument("--fusion", choices=("parallel", "sequential"))
    p.add_argument("--no-mpnn", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("constant", "cosine"))
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--val-every", type=int)
    p.add_argument("--val-pool-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="posterior predictive for a dataset's test nodes")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_inference_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="accuracy mean and std over ensemble seeds")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", default="0 1 2")
    p.add_argument("--out")
    _add_inference_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="training-free baseline predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=("labelprop", "closed-form", "majority"), required=True)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--filter", choices=("identity", "sgc", "hgc"), default="identity")
    p.add_argument("--ridge", type=float, default=1e-4)
    p.add_argument("--k", type=int, default=2, help="low-pass filter depth")
    p.add_argument("--pinv", action="store_true", help="exact pseudo-inverse instead of ridge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep-homophily", help="accuracy across cSBM homophily levels")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--levels", help="e.g. '0.1 0.5 0.9'")
    p.add_argument("--graphs-per-level", type=int)
    p.add_argument("--seeds")
    p.add_argument("--methods", help="subset of: " + " ".join(("nodepfn", "labelprop", "majority", "closed_form:sgc")))
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--out-dir", required=True)
    _add_inference_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("measure-scaling", help="branch forward time versus graph size")
    p.add_argument("--checkpoint")
    p.add_argument("--branch", choices=("attention", "mpnn"), default="attention")
    p.add_argument("--sizes", required=True, help="strictly increasing node (attention) or edge (mpnn) counts")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--n-nodes", type=int, default=2000, help="fixed node count for the mpnn branch")
    p.add_argument("--d-embed", type=int, help="width when no checkpoint is given")
    p.add_argument("--out")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NonFiniteError, NumericalError, SvdError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, ValueError, PriorSamplingError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
