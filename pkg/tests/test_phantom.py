import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrigen.errors import InvalidInput
from mrigen.phantom import (
    MAX_SLICE, FieldStrength, Modality, PhantomGrid, PhantomSpec, SliceMeta, center_crop,
    generate_phantom, normalize_to_u8, phantom_regions, retain_head_slices, split_train_val,
)

modalities = st.sampled_from(list(Modality))
fields = st.sampled_from(list(FieldStrength))
slices = st.integers(1, MAX_SLICE)


def spec(modality=Modality.T1, field=FieldStrength.LOW, slice_index=5, **kw):
    return PhantomSpec(SliceMeta(field, modality, slice_index), **kw)


def test_modality_labels_and_text_forms():
    assert [m.label for m in Modality] == [0, 1, 2]
    assert [m.value for m in Modality] == ["T1", "T2", "FLAIR"]
    assert [f.value for f in FieldStrength] == ["0.3T", "3T"]


def test_slice_meta_rejects_out_of_range_slice():
    with pytest.raises(InvalidInput):
        SliceMeta(FieldStrength.LOW, Modality.T1, 0)
    with pytest.raises(InvalidInput):
        SliceMeta(FieldStrength.LOW, Modality.T1, 19)


def test_slice_meta_coerces_strings():
    meta = SliceMeta("3T", "FLAIR", 2)
    assert meta.field is FieldStrength.HIGH and meta.modality is Modality.FLAIR


def test_phantom_is_deterministic():
    s = spec(seed=7)
    a, b = generate_phantom(s), generate_phantom(s)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (32, 32) and a.min() >= 0 and a.max() <= 1


def test_small_size_rejected():
    with pytest.raises(InvalidInput):
        generate_phantom(spec(size=7))


def test_t2_csf_brighter_than_tissue():
    s = spec(Modality.T2, noise_sigma=0.0)
    img = generate_phantom(s)
    _, tissue, csf = phantom_regions(s)
    assert img[csf].mean() > img[tissue].mean()


def test_low_field_noisier_than_high_field():
    # residual std over background pixels, same geometry and seed
    lo = spec(field=FieldStrength.LOW, seed=3)
    hi = spec(field=FieldStrength.HIGH, seed=3)
    skull, tissue, csf = phantom_regions(lo)
    background = ~(skull | tissue | csf)
    # background is clipped at 0; the clipped std is still monotone in sigma
    r_lo = generate_phantom(lo) - generate_phantom(lo, clean=True)
    r_hi = generate_phantom(hi) - generate_phantom(hi, clean=True)
    assert r_lo[background].std() > r_hi[background].std()
    assert r_lo[tissue].std() > r_hi[tissue].std()


@settings(max_examples=60, deadline=None)
@given(modalities, fields, slices, st.integers(0, 2**32 - 1))
def test_contrast_orderings_hold_without_noise(modality, field, slice_index, seed):
    s = spec(modality, field, slice_index, noise_sigma=0.0, seed=seed)
    img = generate_phantom(s)
    skull, tissue, csf = phantom_regions(s)
    t, c, k = img[tissue].mean(), img[csf].mean(), img[skull].mean()
    if modality is Modality.T2:
        assert c > t
    else:
        assert t > c
    if modality is Modality.FLAIR:
        # skull ring still visible against the background
        assert k > 0


@settings(max_examples=40, deadline=None)
@given(modalities, slices, st.integers(0, 1000))
def test_generate_phantom_pure(modality, slice_index, seed):
    s = spec(modality, slice_index=slice_index, seed=seed, subject_variation=0.1)
    assert np.array_equal(generate_phantom(s), generate_phantom(s))


def test_slices_are_distinguishable():
    a = generate_phantom(spec(slice_index=1, noise_sigma=0.0))
    b = generate_phantom(spec(slice_index=18, noise_sigma=0.0))
    assert np.abs(a - b).max() > 0


def test_regions_disjoint():
    skull, tissue, csf = phantom_regions(spec(subject_variation=0.2))
    assert not (skull & tissue).any() and not (skull & csf).any() and not (tissue & csf).any()
    assert skull.any() and tissue.any() and csf.any()


def test_normalize_examples():
    assert normalize_to_u8([0, 5, 10]).tolist() == [0, 128, 255]
    full = np.arange(256, dtype=np.float64)
    assert np.array_equal(normalize_to_u8(full), full.astype(np.uint8))


def test_normalize_constant_warns_and_zeros():
    with pytest.warns(RuntimeWarning):
        out = normalize_to_u8(np.full((3, 3), 3.7))
    assert out.dtype == np.uint8 and not out.any()


def test_normalize_rejects_non_finite():
    with pytest.raises(InvalidInput):
        normalize_to_u8([0.0, np.nan])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50).filter(lambda v: max(v) > min(v)))
def test_normalize_spans_full_range(values):
    out = normalize_to_u8(values)
    assert out.min() == 0 and out.max() == 255


def test_center_crop_examples():
    img = np.arange(320 * 320, dtype=np.float64).reshape(320, 320)
    out = center_crop(img, 256, 256)
    assert out.shape == (256, 256) and out[0, 0] == img[32, 32]
    assert np.array_equal(center_crop(img, 320, 320), img)
    small = np.arange(25).reshape(5, 5)
    assert np.array_equal(center_crop(small, 3, 3), small[1:4, 1:4])
    with pytest.raises(InvalidInput):
        center_crop(small, 6, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.data())
def test_center_crop_idempotent(h, w, data):
    th = data.draw(st.integers(1, h))
    tw = data.draw(st.integers(1, w))
    img = np.arange(h * w, dtype=np.float64).reshape(h, w)
    once = center_crop(img, tw, th)
    assert np.array_equal(center_crop(once, tw, th), once)


def test_retain_head_slices():
    assert retain_head_slices(list(range(1, 17)), 10) == list(range(1, 11))
    assert retain_head_slices([1, 2, 3, 4], 10) == [1, 2, 3, 4]
    assert retain_head_slices([1, 2, 3], 1) == [1]
    with pytest.raises(InvalidInput):
        retain_head_slices([1], 0)


def test_split_examples():
    train, val = split_train_val(list(range(10)), 0.8, seed=0)
    assert len(train) == 8 and len(val) == 2
    assert split_train_val(list(range(10)), 0.8, seed=4) == split_train_val(list(range(10)), 0.8, seed=4)
    with pytest.warns(RuntimeWarning):
        train, val = split_train_val(["a"], 0.8)
    assert train == ["a"] and val == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.floats(0.05, 0.95), st.integers(0, 99))
def test_split_is_partition(items, ratio, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train, val = split_train_val(items, ratio, seed)
    assert sorted(train + val) == sorted(items)
    assert len(train) == int(np.floor(ratio * len(items) + 0.5))


def test_grid_counts_and_cycling():
    specs = list(PhantomGrid().specs(20, seed=1))
    assert len(specs) == 120
    per_class = {}
    for s in specs:
        per_class.setdefault((s.meta.field, s.meta.modality), []).append(s)
    assert len(per_class) == 6
    first = per_class[(FieldStrength.LOW, Modality.T1)]
    assert [s.meta.slice_index for s in first[:19]] == list(range(1, 19)) + [1]
    assert len({s.seed for s in specs}) == 120
