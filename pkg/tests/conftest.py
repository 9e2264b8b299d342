"""Session-wide trained models shared by the slow tests.

Training runs once per session.  Set ``NODEPFN_TEST_CACHE`` to a directory
to keep the checkpoints between sessions; entries are keyed by a hash of the
full configuration, so changing any setting retrains.
"""

import hashlib
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from nodepfn.baselines import OraclePrior
from nodepfn.io import canonical_json, load_checkpoint, save_checkpoint
from nodepfn.model import ModelConfig
from nodepfn.priors import PriorConfig
from nodepfn.training import TrainConfig, train

DESK_PRIOR = PriorConfig(n_nodes=128, min_classes=2, max_classes=5, feature_dim_range=(3, 16))
DESK_MODEL = ModelConfig(d_embed=64, n_layers=4, n_heads=4, d_feat_max=16, max_classes=10)
DESK_TRAIN = TrainConfig(
    epochs=1, steps_per_epoch=2000, batch_size=8, learning_rate=5e-4, seed=0, val_every=125, val_pool_size=256
)

# Same budget, but no message passing and an Erdos-Renyi-only prior.
ABLATION_PRIOR = replace(DESK_PRIOR, er_fraction=1.0)
ABLATION_MODEL = replace(DESK_MODEL, mpnn_enabled=False)

ORACLE_PRIOR = OraclePrior()
ORACLE_MODEL = ModelConfig(d_embed=64, n_layers=4, n_heads=4, d_feat_max=1, max_classes=2)
ORACLE_TRAIN = TrainConfig(epochs=1, steps_per_epoch=8000, batch_size=32, learning_rate=5e-4, seed=0)
ORACLE_FRACTIONS = (0.25, 0.5, 1.0)


class TrainedModel:
    def __init__(self, checkpoint, val_losses, snapshots=None):
        self.checkpoint = checkpoint
        self.val_losses = val_losses
        self.snapshots = snapshots or {}


def _key(name, prior, model_cfg, train_cfg, extra=None):
    blob = canonical_json([name, prior.to_dict(), model_cfg.to_dict(), train_cfg.to_dict(), extra])
    return f"{name}-{hashlib.sha256(blob).hexdigest()[:16]}"


def _train_cached(name, prior, model_cfg, train_cfg, snapshot_steps=()):
    cache = os.environ.get("NODEPFN_TEST_CACHE")
    key = _key(name, prior, model_cfg, train_cfg, list(snapshot_steps))
    if cache:
        root = Path(cache) / key
        if (root / "done.json").exists():
            info = json.loads((root / "done.json").read_text())
            snaps = {int(s): load_checkpoint(root / f"step_{int(s)}.ckpt") for s in snapshot_steps}
            return TrainedModel(load_checkpoint(root / "final.ckpt"), [tuple(v) for v in info["val_losses"]], snaps)

    snapshots = {}

    def keep(step, params, _state):
        if step in snapshot_steps:
            snapshots[step] = {k: v.copy() for k, v in params.items()}

    result = train(prior, model_cfg, train_cfg, callback=keep if snapshot_steps else None)
    snaps = {}
    for step, params in snapshots.items():
        ck = replace(result.checkpoint, params=params, opt_step=None, opt_m=None, opt_v=None)
        snaps[step] = ck
    model = TrainedModel(result.checkpoint, result.val_losses, snaps)
    if cache:
        root = Path(cache) / key
        root.mkdir(parents=True, exist_ok=True)
        save_checkpoint(root / "final.ckpt", result.checkpoint)
        for step, ck in snaps.items():
            save_checkpoint(root / f"step_{step}.ckpt", ck)
        (root / "done.json").write_text(json.dumps({"val_losses": [list(v) for v in result.val_losses]}))
    return model


@pytest.fixture(scope="session")
def desk_models():
    """Full desk models for training seeds 0, 1, 2 (built lazily)."""
    cache = {}

    def get(seed=0):
        if seed not in cache:
            cache[seed] = _train_cached("desk", DESK_PRIOR, DESK_MODEL, replace(DESK_TRAIN, seed=seed))
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def desk_model(desk_models):
    return desk_models(0)


@pytest.fixture(scope="session")
def ablation_models():
    cache = {}

    def get(seed=0):
        if seed not in cache:
            tcfg = replace(DESK_TRAIN, seed=seed, val_every=0)
            cache[seed] = _train_cached("ablation", ABLATION_PRIOR, ABLATION_MODEL, tcfg)
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def oracle_model():
    steps = tuple(int(f * ORACLE_TRAIN.total_steps) for f in ORACLE_FRACTIONS)
    return _train_cached("oracle", ORACLE_PRIOR, ORACLE_MODEL, ORACLE_TRAIN, snapshot_steps=steps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# Acceptance report
# --------------------------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one result line and asserts ``ok``."""

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
