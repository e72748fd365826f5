from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from samr.data import one_hot_encode
from samr.errors import ManipulationError, ValidationError
from samr.maskops import (
    OPS,
    ManipulationSpec,
    apply_roi,
    is_valid_label_map,
    mirror_lesion,
    plan_manipulations,
    random_manipulate,
    reorganize_rois,
    scale_tumor,
    translate_lesion,
    transplant_lesion,
)

from conftest import random_label_map


def symmetric_brain(n=32, r=12):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    m = np.zeros((n, n), np.uint8)
    m[(yy - n / 2) ** 2 + (xx - n / 2) ** 2 <= r * r] = 1
    return m


def disk(m, cy, cx, r, label):
    yy, xx = np.mgrid[0:m.shape[0], 0:m.shape[1]]
    out = m.copy()
    out[((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (m != 0)] = label
    return out


label_maps = st.integers(0, 2**31 - 1).map(lambda s: random_label_map(np.random.default_rng(s)))


# ROIs ----------------------------------------------------------------------

def test_all_background_rois():
    c = reorganize_rois(one_hot_encode(np.zeros((4, 4), np.uint8)))
    assert c.shape == (3, 4, 4)
    assert np.all(c[0] == 1) and not c[1].any() and not c[2].any()


@given(label_maps)
@settings(max_examples=50, deadline=None)
def test_rois_partition(m):
    c = reorganize_rois(one_hot_encode(m))
    assert np.all(c.sum(axis=0) == 1)
    # pixel-count oracle for the lesion plane
    assert c[2].sum() == sum(int((m == k).sum()) for k in (2, 3, 4))


def test_lesion_plane_counts_present_labels():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = rng.choice(np.array([1, 2, 4], np.uint8), size=(16, 16))
        c = reorganize_rois(one_hot_encode(m))
        assert c[2].sum() == (m == 2).sum() + (m == 4).sum()


def test_rois_torch_batch():
    m = np.random.default_rng(0).integers(0, 5, (2, 8, 8))
    x = torch.from_numpy(np.stack([one_hot_encode(a) for a in m]).astype(np.float32))
    c = reorganize_rois(x)
    assert c.shape == (2, 3, 8, 8)
    assert torch.all(c.sum(dim=1) == 1)


def test_apply_roi_identity_and_zero():
    t = np.random.default_rng(0).normal(size=(5, 6, 6))
    np.testing.assert_array_equal(apply_roi(np.ones((6, 6)), t), t)
    assert not apply_roi(np.zeros((6, 6)), t).any()
    with pytest.raises(ValidationError):
        apply_roi(np.ones((5, 5)), t)


@given(label_maps, st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_roi_masked_copies_sum_to_input(m, seed):
    t = np.random.default_rng(seed).uniform(-1, 1, (5,) + m.shape)
    c = reorganize_rois(one_hot_encode(m)).astype(np.float64)
    total = sum(apply_roi(c[k], t) for k in range(3))
    assert np.max(np.abs(total - t)) <= 1e-6


# mirror ----------------------------------------------------------------------

def test_mirror_no_lesion():
    m = symmetric_brain()
    np.testing.assert_array_equal(mirror_lesion(m), m)


def test_mirror_twice_identity_and_counts():
    base = symmetric_brain()
    m = disk(base, 14, 10, 4, 2)
    m = disk(m, 14, 10, 2, 4)
    once = mirror_lesion(m)
    for k in (2, 4):
        assert (once == k).sum() == (m == k).sum()
    assert not np.array_equal(once, m)
    np.testing.assert_array_equal(mirror_lesion(once), m)


def test_mirror_drops_pixels_outside_brain():
    base = np.zeros((8, 8), np.uint8)
    base[:, :5] = 1
    base[2, 1] = 4
    out = mirror_lesion(base)
    # reflection lands on column 6, background
    assert (out == 4).sum() == 0
    assert is_valid_label_map(out)


# scale ------------------------------------------------------------------------

def test_scale_identity():
    m = disk(symmetric_brain(), 16, 16, 4, 4)
    np.testing.assert_array_equal(scale_tumor(m, 1.0), m)


def test_scale_requires_tumor_and_positive_factor():
    with pytest.raises(ManipulationError, match="no tumor to scale"):
        scale_tumor(symmetric_brain(), 2.0)
    with pytest.raises(ManipulationError):
        scale_tumor(disk(symmetric_brain(), 16, 16, 4, 4), 0.0)


def test_scale_area_ratio_centered_disk():
    base = symmetric_brain(64, 30)
    m = disk(base, 32, 32, 8, 4)
    area = (m == 4).sum()
    up = (scale_tumor(m, 2.0) == 4).sum() / area
    assert 1.8 <= up <= 2.2
    small = scale_tumor(m, 0.5)
    assert 0.4 <= (small == 4).sum() / area <= 0.6
    # shrunken tumor stays within the original plus a 1-pixel rim
    from scipy import ndimage

    allowed = ndimage.binary_dilation(m == 4, structure=np.ones((3, 3)))
    assert np.all(allowed[small == 4])


def test_scale_priority_and_vacated():
    m = disk(symmetric_brain(64, 30), 32, 32, 10, 2)
    m = disk(m, 32, 32, 6, 4)
    small = scale_tumor(m, 0.5)
    # vacated tumor pixels become edema, never background
    vac = (m == 4) & (small != 4)
    assert vac.any() and np.all(small[vac] == 2)
    big = scale_tumor(m, 2.0)
    assert np.all(big[m == 0] == 0)


# transplant / translate -----------------------------------------------------------

def test_transplant_self():
    m = disk(disk(symmetric_brain(), 12, 12, 4, 2), 12, 12, 2, 4)
    np.testing.assert_array_equal(transplant_lesion(m, m), m)


def test_transplant_counts():
    recipient = symmetric_brain()
    donor = disk(disk(symmetric_brain(), 18, 20, 4, 2), 18, 20, 2, 4)
    out = transplant_lesion(recipient, donor)
    for k in (2, 3, 4):
        assert (out == k).sum() == (donor == k).sum()
    assert is_valid_label_map(out)


def test_transplant_clears_recipient_lesion():
    recipient = disk(symmetric_brain(), 10, 10, 3, 3)
    donor = disk(symmetric_brain(), 20, 20, 3, 4)
    out = transplant_lesion(recipient, donor)
    assert (out == 3).sum() == 0 and (out == 4).sum() == (donor == 4).sum()


def test_transplant_errors():
    brain = symmetric_brain()
    with pytest.raises(ManipulationError):
        transplant_lesion(brain, brain)
    donor = np.zeros_like(brain)
    donor[0:2, 0:2] = 4
    with pytest.raises(ManipulationError, match="outside"):
        transplant_lesion(brain, donor)


def test_translate():
    m = disk(symmetric_brain(), 16, 12, 3, 4)
    out = translate_lesion(m, (0, 6))
    assert (out == 4).sum() == (m == 4).sum()
    ys, xs = np.nonzero(out == 4)
    assert abs(xs.mean() - 18) < 0.5
    with pytest.raises(ManipulationError):
        translate_lesion(m, (0, 40))


# random composition ------------------------------------------------------------------

def test_random_manipulate_deterministic(lesion_maps):
    m, donors = lesion_maps[0], lesion_maps[1:5]
    a = random_manipulate(m, 11, donors)
    b = random_manipulate(m, 11, donors)
    np.testing.assert_array_equal(a, b)


def test_random_manipulate_valid(lesion_maps):
    donors = lesion_maps[:4]
    for seed in range(60):
        m = lesion_maps[seed % len(lesion_maps)]
        out = random_manipulate(m, seed, donors)
        assert is_valid_label_map(out)


def test_op_frequency():
    counts = Counter()
    for seed in range(1000):
        for spec in plan_manipulations(np.random.default_rng(seed), 64, n_donors=4):
            counts[spec.op] += 1
    assert set(counts) == set(OPS)
    assert all(counts[o] >= 100 for o in OPS)


def test_spec_validation():
    with pytest.raises(ManipulationError):
        ManipulationSpec(op="rotate")
    with pytest.raises(ManipulationError):
        ManipulationSpec(op="transplant")
    with pytest.raises(ManipulationError):
        ManipulationSpec(op="scale_tumor", factor=-1)
