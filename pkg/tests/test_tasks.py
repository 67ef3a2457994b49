"""Backbone, synthetic dataset and dataset-file tests."""

import numpy as np
import pytest

from picm.diffcore.tensor import Tensor
from picm.prompts import PromptSpec, attach_task_prompts
from picm.tasks import (
    ClassifierHead,
    StagedBackbone,
    TaskError,
    class_attributes,
    cross_entropy,
    export_dataset,
    iter_batches,
    load_dataset,
    read_pnm,
    run_stages,
    softmax_probs,
    synth_dataset,
    write_pnm,
)
from picm.pipeline import pretrain_backbone


def small_backbone(seed=0):
    return StagedBackbone(np.random.default_rng(seed))


class TestBackbone:
    def test_stage1_shape_contract(self):
        bb = small_backbone()
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32))
        f = bb.extract_general(x)
        assert f.shape == (2, 32, 8, 8)

    def test_extract_deterministic(self):
        bb = small_backbone()
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 32, 32)).astype(np.float32))
        assert np.array_equal(bb.extract_general(x).data, bb.extract_general(x).data)

    def test_indivisible_dims_rejected(self):
        bb = small_backbone()
        x = Tensor(np.zeros((1, 3, 30, 32), dtype=np.float32))
        with pytest.raises(TaskError):
            bb.extract_general(x)
        with pytest.raises(TaskError):
            bb.extract_general(Tensor(np.zeros((1, 3, 32), dtype=np.float32)))

    def test_stage_grids_halve(self):
        bb = small_backbone()
        x = bb.embed(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
        grids = []
        for i in range(bb.n_stages):
            x = bb.run_stage(i, x)
            grids.append(x.shape[2:])
        assert grids == [(16, 16), (8, 8), (4, 4), (2, 2)]

    def test_logits_shape_and_softmax_normalization(self):
        bb = small_backbone()
        head = ClassifierHead(np.random.default_rng(2), bb.cfg.widths[-1], 10)
        f = Tensor(np.random.default_rng(3).normal(size=(2, 32, 8, 8)).astype(np.float32))
        logits = run_stages(f, bb, head)
        assert logits.shape == (2, 10)
        probs = softmax_probs(logits).data
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_zero_init_blocks_leave_logits_unchanged(self):
        bb = small_backbone()
        head = ClassifierHead(np.random.default_rng(2), bb.cfg.widths[-1], 4)
        wrapped = attach_task_prompts(bb, PromptSpec(variant="block"),
                                      np.random.default_rng(4))
        f = Tensor(np.random.default_rng(3).normal(size=(1, 32, 8, 8)).astype(np.float32))
        base = run_stages(f, bb, head)
        prompted = run_stages(f, wrapped, head)
        assert np.array_equal(base.data, prompted.data)

    def test_cross_entropy_reference_values(self):
        perfect = Tensor(np.array([[100.0, 0.0, 0.0]], dtype=np.float64))
        assert float(cross_entropy(perfect, np.array([0])).data) == pytest.approx(0.0, abs=1e-6)
        uniform = Tensor(np.zeros((1, 5), dtype=np.float64))
        assert float(cross_entropy(uniform, np.array([2])).data) == pytest.approx(np.log(5), abs=1e-6)

    def test_pretraining_reproducible(self):
        ds = synth_dataset(seed=9, n=48, classes=4, size=32)
        states = []
        for _ in range(2):
            bb, head, _ = pretrain_backbone(ds, seed=5, steps=6, batch_size=8,
                                            eval_every=1000)
            state = bb.state_dict()
            state.update(head.state_dict())
            states.append(state)
        assert states[0].keys() == states[1].keys()
        for key in states[0]:
            assert np.array_equal(states[0][key], states[1][key]), key


class TestSynthDataset:
    def test_deterministic_in_seed(self):
        a = synth_dataset(seed=3, n=32, classes=4)
        b = synth_dataset(seed=3, n=32, classes=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.split, b.split)
        c = synth_dataset(seed=4, n=32, classes=4)
        assert not np.array_equal(a.images, c.images)

    def test_class_balance_within_one(self):
        ds = synth_dataset(seed=0, n=34, classes=4)
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_both_splits_present_and_disjoint(self):
        ds = synth_dataset(seed=1, n=200, classes=4)
        n_val = int((ds.split == "val").sum())
        assert 0 < n_val < len(ds.images)
        tr_images, tr_labels = ds.subset("train")
        va_images, va_labels = ds.subset("val")
        assert len(tr_images) + len(va_images) == len(ds.images)
        assert len(tr_labels) + len(va_labels) == len(ds.labels)

    def test_label_attributes_distinct(self):
        four = [class_attributes(l, 4) for l in range(4)]
        assert len(set(four)) == 4
        eight = [class_attributes(l, 8) for l in range(8)]
        assert len(set(eight)) == 8

    def test_label_range_checked(self):
        with pytest.raises(TaskError):
            class_attributes(4, 4)
        with pytest.raises(TaskError):
            class_attributes(-1, 4)

    def test_parameter_validation(self):
        with pytest.raises(TaskError):
            synth_dataset(seed=0, n=10, classes=1)
        with pytest.raises(TaskError):
            synth_dataset(seed=0, n=10, classes=17)
        with pytest.raises(TaskError):
            synth_dataset(seed=0, n=3, classes=4)
        with pytest.raises(TaskError):
            synth_dataset(seed=0, n=8, classes=4, size=20)

    def test_pixel_range_and_dtype(self):
        ds = synth_dataset(seed=2, n=8, classes=2)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        # 8-bit quantized pixels survive PPM export exactly
        assert np.array_equal(ds.images, np.round(ds.images * 255.0) / 255.0)

    def test_iter_batches_is_seeded_permutation(self):
        ds = synth_dataset(seed=5, n=32, classes=4)
        rng = np.random.default_rng(7)
        seen = []
        for xb, yb in iter_batches(ds.images, ds.labels, 8, rng):
            assert xb.shape == (8, 3, 32, 32)
            seen.extend(yb.tolist())
        assert len(seen) == 32
        assert np.array_equal(np.sort(np.bincount(ds.labels)), np.sort(np.bincount(seen)))
        again = []
        for xb, yb in iter_batches(ds.images, ds.labels, 8, np.random.default_rng(7)):
            again.extend(yb.tolist())
        assert seen == again

    def test_iter_batches_unshuffled_order(self):
        ds = synth_dataset(seed=5, n=16, classes=4)
        labels = []
        for _, yb in iter_batches(ds.images, ds.labels, 4, np.random.default_rng(0), shuffle=False):
            labels.extend(yb.tolist())
        assert np.array_equal(labels, ds.labels)


class TestDatasetFiles:
    def test_ppm_roundtrip_exact(self, tmp_path):
        ds = synth_dataset(seed=6, n=4, classes=2)
        path = tmp_path / "img.ppm"
        write_pnm(path, ds.images[0])
        assert np.array_equal(read_pnm(path), ds.images[0])

    def test_pgm_roundtrip(self, tmp_path):
        img = np.linspace(0.0, 1.0, 64, dtype=np.float32).reshape(8, 8)
        path = tmp_path / "img.pgm"
        write_pnm(path, img)
        back = read_pnm(path)
        assert back.shape == (8, 8)
        assert np.abs(back - img).max() <= 0.5 / 255.0

    def test_pnm_error_paths(self, tmp_path):
        with pytest.raises(TaskError):
            write_pnm(tmp_path / "x.ppm", np.zeros((4, 4, 4)))
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P6\n4 4\n1023\n" + b"\x00" * 48)
        with pytest.raises(TaskError):
            read_pnm(bad)
        trunc = tmp_path / "trunc.ppm"
        trunc.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(TaskError):
            read_pnm(trunc)
        ascii_pnm = tmp_path / "ascii.ppm"
        ascii_pnm.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(TaskError):
            read_pnm(ascii_pnm)

    def test_export_load_roundtrip(self, tmp_path):
        ds = synth_dataset(seed=8, n=12, classes=4)
        export_dataset(ds, tmp_path / "ds")
        images, labels, split = load_dataset(tmp_path / "ds")
        assert np.array_equal(images, ds.images)
        assert np.array_equal(labels, ds.labels)
        assert np.array_equal(split, ds.split)

    def test_missing_file_error_names_it(self, tmp_path):
        ds = synth_dataset(seed=8, n=8, classes=2)
        root = tmp_path / "ds"
        export_dataset(ds, root)
        victim = sorted(root.glob("*.ppm"))[2]
        victim.unlink()
        with pytest.raises(TaskError, match=victim.name):
            load_dataset(root)

    def test_manifest_errors(self, tmp_path):
        root = tmp_path / "ds"
        root.mkdir()
        with pytest.raises(TaskError, match="manifest"):
            load_dataset(root)
        (root / "labels.csv").write_text("file,klass\n")
        with pytest.raises(TaskError, match="header"):
            load_dataset(root)
        write_pnm(root / "a.ppm", np.zeros((3, 4, 4)))
        (root / "labels.csv").write_text("filename,label\na.ppm,zero\n")
        with pytest.raises(TaskError, match="label"):
            load_dataset(root)
        (root / "labels.csv").write_text("filename,label\n")
        with pytest.raises(TaskError, match="empty"):
            load_dataset(root)
