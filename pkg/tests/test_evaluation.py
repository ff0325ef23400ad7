import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccda import evaluation as E
from ccda.evaluation import ConfusionMatrix, iou_report, mean_over, rare_classes


def loop_confusion(truth, pred, C, ignore=255):
    cm = np.zeros((C, C), dtype=np.int64)
    for t, p in zip(np.ravel(truth), np.ravel(pred)):
        if t != ignore:
            cm[t, p] += 1
    return cm


def test_perfect_and_disjoint():
    y = np.array([[0, 1], [2, 2]])
    cm = ConfusionMatrix(3).accumulate(y, y).counts
    assert np.count_nonzero(cm - np.diag(np.diag(cm))) == 0
    cm = ConfusionMatrix(3).accumulate(y, (y + 1) % 3).counts
    assert np.all(np.diag(cm) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_accumulate_matches_loop(seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 4, (6, 7))
    t[rng.random(t.shape) < 0.2] = 255
    p = rng.integers(0, 4, (6, 7))
    np.testing.assert_array_equal(ConfusionMatrix(4).accumulate(t, p).counts, loop_confusion(t, p, 4))


def test_accumulate_rejects_bad_input():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).accumulate(np.array([0, 1]), np.array([0]))
    with pytest.raises(ValueError):
        ConfusionMatrix(2).accumulate(np.array([0, 2]), np.array([0, 1]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_accumulate_shard_and_order_invariant(seed, shards):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, 3, (shards, 20)), rng.integers(0, 3, (shards, 20))
    whole = ConfusionMatrix(3).accumulate(t, p)
    parts = [ConfusionMatrix(3).accumulate(t[i], p[i]) for i in range(shards)]
    merged = parts[0]
    for part in parts[1:]:
        merged = merged.merge(part)
    rev = ConfusionMatrix(3)
    for i in reversed(range(shards)):
        rev.accumulate(t[i], p[i])
    assert np.array_equal(whole.counts, merged.counts) and np.array_equal(whole.counts, rev.counts)


def test_iou_examples():
    r = iou_report(np.eye(3, dtype=np.int64) * 7)
    assert r.per_class == [1.0, 1.0, 1.0] and r.miou == 1.0
    r = iou_report(np.array([[3, 1], [1, 3]]))
    assert r.per_class == pytest.approx([0.6, 0.6]) and r.miou == pytest.approx(0.6)
    r = iou_report(np.array([[2, 0, 0], [0, 0, 0], [0, 0, 1]]))
    assert r.per_class[1] is None and r.miou == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000), st.integers(1, 6))
def test_iou_scale_invariant(k, C):
    assert iou_report(np.eye(C, dtype=np.int64) * k).miou == 1.0
    rng = np.random.default_rng(k)
    cm = rng.integers(0, 5, (C, C))
    a, b = iou_report(cm), iou_report(cm * k)
    assert a.per_class == b.per_class


def test_rare_classes_bottom_tercile():
    assert rare_classes(np.array([900, 50, 30, 10, 5])) == [3, 4]
    assert rare_classes(np.array([10, 20, 30])) == [0]
    assert rare_classes(np.array([5, 1])) == [1]


def test_mean_over_skips_undefined():
    r = E.IoUReport([0.5, None, 0.25], 0.375)
    assert mean_over(r, [1, 2]) == 0.25
    assert np.isnan(mean_over(r, [1]))


def test_write_report(tmp_path):
    r = iou_report(np.array([[3, 1], [1, 3]]))
    E.write_report(r, tmp_path, rare=[1], extra={"note": "x"}, plots=True)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["miou"] == pytest.approx(0.6) and data["rare_class_iou"] == pytest.approx(0.6)
    assert (tmp_path / "report.csv").read_text().startswith("class,iou")
    assert (tmp_path / "iou.png").stat().st_size > 0


def test_random_init_near_chance(tiny_pair, tiny_config):
    from ccda.trainer import Trainer
    src, _ = tiny_pair
    seg = Trainer(tiny_config, 5).seg
    assert E.iou_report(E.evaluate(seg, src["train"], 5)).miou < 0.3


def test_ablation_table_and_failed_cell(tmp_path, tiny_pair, tiny_config, monkeypatch):
    src, tgt = tiny_pair
    cfg = replace(tiny_config, iterations=2)
    real_train = E.train

    def flaky(config, *a, **k):
        if config.variant == "class":
            raise RuntimeError("boom")
        return real_train(config, *a, **k)

    monkeypatch.setattr(E, "train", flaky)
    table = E.run_ablation(cfg, src, tgt, [0], tmp_path)
    assert [c.variant for c in table.cells] == ["basic", "class", "full"]
    assert table.cell("class", 0).error == "RuntimeError: boom"
    assert table.cell("full", 0).error is None and 0 <= table.cell("full", 0).miou <= 1
    data = json.loads((tmp_path / "ablation.json").read_text())
    assert data["paper_reference_miou"] == {"basic": 34.9, "class": 37.0, "full": 37.7}
    assert data["summary"]["class"]["n"] == 0
    assert (tmp_path / "ablation.csv").exists()


def test_ablation_needs_seeds(tmp_path, tiny_pair, tiny_config):
    with pytest.raises(ValueError):
        E.run_ablation(tiny_config, *tiny_pair, [], tmp_path)
