import hashlib
import struct

import numpy as np
import pytest

from nodepfn.graph import Graph, PpdMatrix, edge_homophily
from nodepfn.io import (
    Checkpoint,
    DatasetFile,
    FormatError,
    checkpoint_bytes,
    dataset_bytes,
    load_checkpoint,
    load_dataset,
    parse_checkpoint,
    parse_dataset,
    read_dataset,
    save_checkpoint,
    save_dataset,
)
from nodepfn.model import ModelConfig, init_params
from nodepfn.priors import PriorConfig, assemble_task, task_rng


def small_dataset(with_preds=False, meta=None):
    g = Graph(5, [(0, 1), (1, 2), (3, 4)], np.arange(10.0).reshape(5, 2), [0, 1, 1, -1, 0], 2)
    preds = None
    if with_preds:
        preds = PpdMatrix([[0.2, 0.8], [0.5, 0.5]], [0, 1], [2, 4])
    return DatasetFile(g, np.array([0, 1]), np.array([2, 4]), preds, meta or {})


def reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


class TestDatasetFormat:
    def test_round_trip_bytes(self, tmp_path):
        raw = dataset_bytes(small_dataset(with_preds=True, meta={"b": 1, "a": [1.5]}))
        path = tmp_path / "d.npfn"
        path.write_bytes(raw)
        ds = read_dataset(path)
        assert dataset_bytes(ds) == raw
        assert ds.meta == {"a": [1.5], "b": 1}
        np.testing.assert_array_equal(ds.predictions.argmax_labels(), [1, 0])

    def test_header_layout(self):
        raw = dataset_bytes(small_dataset())
        assert raw[:8] == b"NPFNDATA"
        version, flags = struct.unpack_from("<II", raw, 8)
        n, d, C, _, E = struct.unpack_from("<QQIIQ", raw, 16)
        assert (version, flags, n, d, C, E) == (1, 0, 5, 2, 2, 3)

    def test_unknown_label_kept(self, tmp_path):
        ds = small_dataset()
        save_dataset(tmp_path / "x", ds.graph, ds.train_ids, ds.test_ids)
        g, tr, te = load_dataset(tmp_path / "x")
        assert g.y[3] == -1
        np.testing.assert_array_equal(tr, [0, 1])
        np.testing.assert_array_equal(te, [2, 4])

    def test_mask_overlap_rejected(self):
        ds = small_dataset()
        raw = bytearray(dataset_bytes(ds)[:-32])
        n = 5
        mask_off = 8 + 8 + 32 + 8 * 10 + 4 * n + 16 * 3
        raw[mask_off + 1] = raw[mask_off]  # copy the train bitmap over the test bitmap
        with pytest.raises(FormatError, match="mask overlap"):
            parse_dataset(reseal(bytes(raw)))

    def test_checksum_mismatch(self):
        raw = bytearray(dataset_bytes(small_dataset()))
        raw[60] ^= 1
        with pytest.raises(FormatError, match="checksum"):
            parse_dataset(bytes(raw))

    def test_unknown_version(self):
        raw = bytearray(dataset_bytes(small_dataset())[:-32])
        struct.pack_into("<I", raw, 8, 2)
        with pytest.raises(FormatError, match="version.*offset 8"):
            parse_dataset(reseal(bytes(raw)))

    def test_directed_flag_rejected(self):
        raw = bytearray(dataset_bytes(small_dataset())[:-32])
        struct.pack_into("<I", raw, 12, 1)
        with pytest.raises(FormatError, match="directed"):
            parse_dataset(reseal(bytes(raw)))

    def test_label_out_of_range_names_offset(self):
        raw = bytearray(dataset_bytes(small_dataset())[:-32])
        lab_off = 48 + 8 * 10
        struct.pack_into("<i", raw, lab_off + 4 * 2, 7)
        with pytest.raises(FormatError, match=rf"labels.*offset {lab_off + 8}"):
            parse_dataset(reseal(bytes(raw)))

    def test_unsorted_edges_rejected(self):
        raw = bytearray(dataset_bytes(small_dataset())[:-32])
        edge_off = 48 + 80 + 20
        struct.pack_into("<qq", raw, edge_off, 3, 4)
        with pytest.raises(FormatError, match="edges"):
            parse_dataset(reseal(bytes(raw)))

    def test_truncated(self):
        raw = dataset_bytes(small_dataset())[:-32][:40]
        with pytest.raises(FormatError, match="truncated"):
            parse_dataset(reseal(raw))

    def test_generated_task_round_trip_homophily(self, tmp_path):
        cfg = PriorConfig()
        task = assemble_task(cfg, task_rng(0), family="csbm", h=0.6)
        save_dataset(tmp_path / "t", task.graph, task.train_ids, task.test_ids, meta=task.meta)
        g, tr, te = load_dataset(tmp_path / "t")
        assert g.n == 1024
        assert edge_homophily(g) == pytest.approx(edge_homophily(task.graph), abs=1e-12)
        np.testing.assert_array_equal(g.X, task.graph.X)
        raw = (tmp_path / "t").read_bytes()
        assert dataset_bytes(read_dataset(tmp_path / "t")) == raw


def make_checkpoint(with_opt=True):
    cfg = ModelConfig(d_embed=8, n_layers=1, n_heads=2, d_feat_max=3, max_classes=3)
    params = init_params(cfg, seed=1, dtype=np.float32)
    ck = Checkpoint(cfg.to_dict(), params, {"train_config": {"seed": 4}}, epoch=2, step_in_epoch=3, global_step=11, seed=4)
    if with_opt:
        ck.opt_step, ck.opt_skipped = 11, 1
        ck.opt_m = {k: v * 0.5 for k, v in params.items()}
        ck.opt_v = {k: v * v for k, v in params.items()}
    return ck


class TestCheckpointFormat:
    @pytest.mark.parametrize("with_opt", [True, False])
    def test_round_trip_bytes(self, tmp_path, with_opt):
        ck = make_checkpoint(with_opt)
        save_checkpoint(tmp_path / "c", ck)
        raw = (tmp_path / "c").read_bytes()
        back = load_checkpoint(tmp_path / "c")
        assert checkpoint_bytes(back) == raw
        assert back.has_optimizer is with_opt
        assert (back.epoch, back.step_in_epoch, back.global_step, back.seed) == (2, 3, 11, 4)
        for k, v in ck.params.items():
            assert back.params[k].dtype == np.float32
            np.testing.assert_array_equal(back.params[k], v)

    def test_float64_tensors(self):
        ck = make_checkpoint(False)
        ck.params = {k: v.astype(np.float64) for k, v in ck.params.items()}
        back = parse_checkpoint(checkpoint_bytes(ck))
        assert all(v.dtype == np.float64 for v in back.params.values())

    def test_magic_and_version(self):
        raw = checkpoint_bytes(make_checkpoint())
        assert raw[:8] == b"NPFNCKPT"
        body = bytearray(raw[:-32])
        struct.pack_into("<I", body, 8, 9)
        with pytest.raises(FormatError, match="unsupported version 9"):
            parse_checkpoint(reseal(bytes(body)))

    def test_corrupt_checksum(self):
        raw = bytearray(checkpoint_bytes(make_checkpoint()))
        raw[-1] ^= 0xFF
        with pytest.raises(FormatError, match="checksum"):
            parse_checkpoint(bytes(raw))

    def test_dataset_is_not_checkpoint(self):
        with pytest.raises(FormatError, match="magic"):
            parse_checkpoint(dataset_bytes(small_dataset()))

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        save_checkpoint(tmp_path / "c", make_checkpoint())
        save_checkpoint(tmp_path / "c", make_checkpoint())
        assert [p.name for p in tmp_path.iterdir()] == ["c"]
