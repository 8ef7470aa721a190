import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import fuse_oracle, head_prefix_length, largest_component_oracle
from selfseg.fusion import FusionConfig, fuse_probabilities, head_region_mask, head_slab, make_pseudo_labels
from selfseg.phantom import PhantomSpec, generate_case
from selfseg.volume import SEG3, LabelMap, ProbMap


def slices_with_counts(counts, ny=4, nz=3):
    """Foreground LabelMap whose sagittal slice i holds counts[i] voxels."""
    arr = np.zeros((len(counts), ny, nz), dtype=np.uint8)
    for i, c in enumerate(counts):
        arr[i].flat[:c] = 1
    return LabelMap.from_array(arr)


def random_probs(r, shape=(3, 5, 4, 3)):
    raw = r.random(shape) ** 3
    return raw / raw.sum(axis=0, keepdims=True)


def test_defaults():
    cfg = FusionConfig()
    assert (cfg.w0, cfg.w1, cfg.head_fraction, cfg.axis, cfg.direction) == (0.8, 0.6, 0.6, 0, "ascending")
    with pytest.raises(ValueError):
        FusionConfig(w0=1.2)


def test_head_uniform_slices():
    m = head_region_mask(slices_with_counts([1] * 10))
    assert m[:6].all() and not m[6:].any()


def test_head_front_loaded():
    m = head_region_mask(slices_with_counts([5, 1, 1, 1, 1, 1]))
    assert m[:2].all() and not m[2:].any()


def test_head_empty():
    assert not head_region_mask(slices_with_counts([0] * 5)).any()
    assert head_slab(slices_with_counts([0] * 5)) is None


def test_head_descending():
    cfg = FusionConfig(direction="descending")
    m = head_region_mask(slices_with_counts([1, 1, 1, 1, 5]), cfg)
    assert m[3:].all() and not m[:3].any()


def test_head_other_axis():
    arr = np.zeros((3, 10, 2), dtype=np.uint8)
    arr[0, :, 0] = 1
    m = head_region_mask(LabelMap.from_array(arr), FusionConfig(axis=1))
    assert m[:, :6].all() and not m[:, 6:].any()


@given(st.lists(st.integers(0, 12), min_size=1, max_size=16), st.sampled_from([0.1, 0.25, 0.5, 0.6, 0.75, 0.9]))
def test_head_prefix_matches_exact_scan(counts, frac):
    lm = slices_with_counts(counts)
    m = head_region_mask(lm, FusionConfig(head_fraction=frac))
    if sum(counts) == 0:
        assert not m.any()
        return
    k = head_prefix_length(counts, frac)
    covered = m.any(axis=(1, 2))
    assert covered.tolist() == [True] * k + [False] * (len(counts) - k)
    # whole slices: a slice is either fully in or fully out
    assert all(m[i].all() or not m[i].any() for i in range(len(counts)))


def test_fuse_examples():
    pA = np.array([0.2, 0.3, 0.5]).reshape(3, 1, 1, 1)
    pB = np.array([0.6, 0.2, 0.2]).reshape(3, 1, 1, 1)
    head = fuse_probabilities(ProbMap(pA), ProbMap(pB), np.ones((1, 1, 1), bool))
    body = fuse_probabilities(ProbMap(pA), ProbMap(pB), np.zeros((1, 1, 1), bool))
    assert np.allclose(head.data.ravel(), [0.28, 0.28, 0.44], atol=1e-7)
    assert np.allclose(body.data.ravel(), [0.44, 0.24, 0.32], atol=1e-7)


def test_fuse_shape_mismatch(rng):
    a = ProbMap(random_probs(rng))
    b = ProbMap(random_probs(rng, (3, 5, 4, 2)))
    with pytest.raises(ValueError):
        fuse_probabilities(a, b, np.ones(a.dims, bool))


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_fuse_properties(seed, w0, w1):
    r = np.random.default_rng(seed)
    a, b = ProbMap(random_probs(r)), ProbMap(random_probs(r))
    head = r.random(a.dims) < 0.5
    cfg = FusionConfig(w0=w0, w1=w1)
    f = fuse_probabilities(a, b, head, cfg)
    assert np.all(np.abs(f.data.sum(axis=0, dtype=np.float64) - 1) <= 1e-5)
    lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
    assert np.all(f.data >= lo - 1e-6) and np.all(f.data <= hi + 1e-6)
    assert np.allclose(f.data, fuse_oracle(a.data, b.data, head, w0, w1), atol=1e-6)
    # swapping teachers together with complementary weights gives the same map
    g = fuse_probabilities(b, a, head, FusionConfig(w0=1 - w0, w1=1 - w1))
    assert np.allclose(f.data, g.data, atol=1e-6)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_weight_degeneracy(seed):
    r = np.random.default_rng(seed)
    a, b = ProbMap(random_probs(r)), ProbMap(random_probs(r))
    head = r.random(a.dims) < 0.5
    assert np.array_equal(fuse_probabilities(a, b, head, FusionConfig(w0=1.0, w1=0.0)).data, a.data)
    assert np.array_equal(fuse_probabilities(a, b, head, FusionConfig(w0=0.0, w1=1.0)).data, b.data)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15)
def test_identical_teachers(seed):
    a = ProbMap(random_probs(np.random.default_rng(seed)))
    f = fuse_probabilities(a, a, np.random.default_rng(seed + 1).random(a.dims) < 0.5)
    assert np.allclose(f.data, a.data, atol=1e-7)


def test_pseudo_labels_from_perfect_teachers():
    truth = generate_case(PhantomSpec(noise_sigma=0.0), 2).truth_seg
    one_hot = np.stack([(truth.array == k) for k in range(3)]).astype(np.float32)
    p = ProbMap(one_hot, SEG3, truth.spacing)
    pseudo, diag = make_pseudo_labels(p, p)
    assert np.array_equal(pseudo.array, largest_component_oracle(truth.array))
    assert diag["class_voxels"]["tumor"] == int((pseudo.array == 2).sum())
    assert diag["weights"] == {"w0": 0.8, "w1": 0.6}


def test_pseudo_labels_all_background():
    bg = np.zeros((3, 4, 4, 4), dtype=np.float32)
    bg[0] = 1
    pseudo, diag = make_pseudo_labels(ProbMap(bg), ProbMap(bg))
    assert not pseudo.array.any()
    assert diag["head_slab"] is None


@pytest.mark.parametrize("seed", range(20))
def test_pseudo_labels_match_scalar_oracle(seed):
    r = np.random.default_rng(seed)
    a, b = random_probs(r, (3, 8, 5, 4)), random_probs(r, (3, 8, 5, 4))
    pa, pb = ProbMap(a), ProbMap(b)
    pseudo, diag = make_pseudo_labels(pa, pb)
    # straight-line reference: mean map -> extent -> slice counts -> prefix -> fuse -> argmax -> LCC
    A, B = pa.data.astype(np.float64), pb.data.astype(np.float64)
    extent = np.argmax(0.5 * A + 0.5 * B, axis=0) > 0
    counts = [int(extent[i].sum()) for i in range(extent.shape[0])]
    head = np.zeros(extent.shape, bool)
    if sum(counts):
        head[:head_prefix_length(counts, 0.6)] = True
    fused = fuse_oracle(A, B, head, 0.8, 0.6)
    expect = largest_component_oracle(np.argmax(fused, axis=0).astype(np.uint8))
    assert np.array_equal(pseudo.array, expect)
