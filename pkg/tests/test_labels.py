import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ccda.labels import (PatchGrid, coarse_labels_from_prediction, coarse_labels_from_truth, one_hot,
                         pseudo_labels, uncertainty_mask)
from ccda.verify import oracles as O
from conftest import rand_labels, rand_probs, t64


def px(values):
    """A single pixel probability vector as a (1, C, 1, 1) map."""
    return t64(np.asarray(values, dtype=float).reshape(1, -1, 1, 1))


def test_grid_for_image_ceil():
    g = PatchGrid.for_image(10, 7, 4)
    assert (g.rows, g.cols) == (3, 2)
    with pytest.raises(ValueError):
        g.check(20, 7)
    with pytest.raises(ValueError):
        PatchGrid.for_image(8, 8, 0)


def test_truth_presence_row():
    lab = torch.zeros((1, 4, 4), dtype=torch.long)
    lab[0, 1, 2] = 2
    W = coarse_labels_from_truth(lab, PatchGrid.for_image(4, 4, 4), 4)
    assert W[0, :, 0, 0].tolist() == [1, 0, 1, 0]


def test_truth_single_pixel_counts():
    lab = torch.zeros((1, 64, 64), dtype=torch.long)
    lab[0, 10, 10] = 3
    W = coarse_labels_from_truth(lab, PatchGrid.for_image(64, 64, 64), 4)
    assert W[0, 3, 0, 0] == 1


def test_truth_all_ignore_patch():
    lab = torch.full((1, 4, 8), 255, dtype=torch.long)
    lab[0, :, 4:] = 1
    W = coarse_labels_from_truth(lab, PatchGrid.for_image(4, 8, 4), 3)
    assert W[0, :, 0, 0].tolist() == [0, 0, 0]
    assert W[0, :, 0, 1].tolist() == [0, 1, 0]


def test_truth_grid_mismatch():
    with pytest.raises(ValueError):
        coarse_labels_from_truth(torch.zeros((1, 8, 8), dtype=torch.long), PatchGrid(4, 4, 1, 1), 2)


def test_prediction_presence_examples():
    probs = torch.tensor([0.95, 0.03, 0.02], dtype=torch.float64).reshape(1, 3, 1, 1).repeat(1, 1, 2, 2)
    probs[0, :, 1, 1] = torch.tensor([0.02, 0.03, 0.95])
    W = coarse_labels_from_prediction(probs, PatchGrid.for_image(2, 2, 2), 0.9)
    assert W[0, :, 0, 0].tolist() == [1, 0, 1]
    uniform = torch.full((1, 5, 4, 4), 0.2, dtype=torch.float64)
    assert coarse_labels_from_prediction(uniform, PatchGrid.for_image(4, 4, 2), 0.9).sum() == 0


def test_prediction_strict_threshold():
    W = coarse_labels_from_prediction(px([0.9, 0.1]), PatchGrid(1, 1, 1, 1), 0.9)
    assert W.sum() == 0


def test_prediction_preconditions():
    g = PatchGrid(2, 2, 1, 1)
    with pytest.raises(ValueError):
        coarse_labels_from_prediction(torch.full((1, 2, 2, 2), 0.4), g, 0.9)
    with pytest.raises(ValueError):
        coarse_labels_from_prediction(torch.full((1, 2, 2, 2), 0.5), g, 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_prediction_matches_pixel_scan(seed):
    rng = np.random.default_rng(seed)
    probs = rand_probs(rng, 1, 3, 8, 8)
    got = coarse_labels_from_prediction(t64(probs), PatchGrid.for_image(8, 8, 4), 0.5)
    np.testing.assert_array_equal(got.numpy(), O.patch_presence_from_probs(probs, 4, 4, 0.5))


@pytest.mark.parametrize("seed", range(10))
def test_truth_matches_pixel_scan(seed):
    rng = np.random.default_rng(seed)
    lab = rand_labels(rng, 2, 4, 9, 7, ignore_frac=0.2)
    got = coarse_labels_from_truth(torch.tensor(lab), PatchGrid.for_image(9, 7, 4), 4)
    np.testing.assert_array_equal(got.numpy(), O.patch_presence_from_labels(lab, 4, 4, 4))


def test_pseudo_labels_examples():
    assert pseudo_labels(px([0.7, 0.2, 0.1])).item() == 0
    assert pseudo_labels(px([0.4, 0.4, 0.2])).item() == 0
    assert pseudo_labels(px([0.2, 0.4, 0.4])).item() == 1
    assert one_hot(pseudo_labels(px([0.7, 0.2, 0.1])), 3)[0, :, 0, 0].tolist() == [1, 0, 0]


@pytest.mark.parametrize("seed", range(10))
def test_pseudo_labels_match_scan(seed):
    rng = np.random.default_rng(seed)
    probs = rand_probs(rng, 2, 4, 5, 6)
    probs[0, :, 0, 0] = [0.3, 0.3, 0.3, 0.1]  # a tie
    np.testing.assert_array_equal(pseudo_labels(t64(probs)).numpy(), O.argmax_labels(probs))


def test_uncertainty_boundaries():
    assert uncertainty_mask(px([0.4, 0.35, 0.25]), 0.5).item() == 1
    assert uncertainty_mask(px([0.5, 0.3, 0.2]), 0.5).item() == 0
    uniform = torch.full((1, 2, 3, 3), 0.5, dtype=torch.float64)
    assert uncertainty_mask(uniform, 0.5).sum() == 0
    with pytest.raises(ValueError):
        uncertainty_mask(uniform, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_uncertainty_matches_scan(seed):
    rng = np.random.default_rng(seed)
    probs = rand_probs(rng, 1, 3, 6, 6)
    np.testing.assert_array_equal(uncertainty_mask(t64(probs), 0.6).numpy(), O.uncertainty_mask(probs, 0.6))


def test_one_hot_ignore_and_range():
    oh = one_hot(torch.tensor([[[0, 255], [2, 1]]]), 3)
    assert oh[0, :, 0, 1].sum() == 0
    assert oh.sum() == 3
    with pytest.raises(ValueError):
        one_hot(torch.tensor([[[3]]]), 3)


# -- invariants --------------------------------------------------------------

label_maps = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=60, deadline=None)
@given(label_maps, st.integers(2, 5), st.integers(2, 4))
def test_binarization_invariance(rng, C, patch):
    lab = rand_labels(rng, 1, C, 8, 8, ignore_frac=0.1)
    grid = PatchGrid.for_image(8, 8, patch)
    before = coarse_labels_from_truth(torch.tensor(lab), grid, C)
    # inside one patch, copy pixel p's class onto pixel q, where q's own class
    # (if any) still appears elsewhere in that patch
    r, c = int(rng.integers(grid.rows)), int(rng.integers(grid.cols))
    block = lab[0, r * patch:(r + 1) * patch, c * patch:(c + 1) * patch]
    cells = [tuple(ix) for ix in np.argwhere(np.ones_like(block))]
    p, q = (cells[i] for i in rng.choice(len(cells), 2, replace=False))
    if block[p] == 255 or (block[q] != 255 and (block == block[q]).sum() < 2):
        return
    block[q] = block[p]
    assert torch.equal(coarse_labels_from_truth(torch.tensor(lab), grid, C), before)


@settings(max_examples=60, deadline=None)
@given(label_maps, st.floats(0.05, 0.9), st.floats(0.01, 0.9))
def test_th_w_monotone(rng, th_hi, delta):
    th_lo = max(th_hi - delta, 1e-3)
    probs = t64(rand_probs(rng, 1, 4, 8, 8, scale=3.0))
    grid = PatchGrid.for_image(8, 8, 3)
    hi = coarse_labels_from_prediction(probs, grid, th_hi)
    lo = coarse_labels_from_prediction(probs, grid, th_lo)
    assert torch.all(lo >= hi)


@settings(max_examples=60, deadline=None)
@given(label_maps, st.integers(2, 6), st.floats(0.01, 0.99))
def test_prediction_truth_consistency(rng, C, th):
    lab = torch.tensor(rand_labels(rng, 1, C, 8, 8))
    grid = PatchGrid.for_image(8, 8, 4)
    from_pred = coarse_labels_from_prediction(one_hot(lab, C, dtype=torch.float64), grid, th)
    assert torch.equal(from_pred, coarse_labels_from_truth(lab, grid, C).to(torch.float64))


@settings(max_examples=60, deadline=None)
@given(label_maps, st.integers(1, 6))
def test_pseudo_label_idempotence(rng, C):
    lab = torch.tensor(rand_labels(rng, 2, C, 5, 7))
    assert torch.equal(pseudo_labels(one_hot(lab, C)), lab)
