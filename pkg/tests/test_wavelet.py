import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import filter_bank_matrix
from isofmm.errors import ConfigError, DataError
from isofmm.filters import daubechies
from isofmm.imagecore import ImageGrid, vectorize
from isofmm.wavelet import (
    CoefSet,
    WaveletSpec,
    coef_index_map,
    dwt1d,
    dwt2d,
    dwt2d_matrix,
    idwt1d,
    idwt2d,
    max_levels,
    read_coefset,
    transform_images,
    transform_matrix_1d,
    write_coefset,
)

DB4_J2 = WaveletSpec(4, 2)


# --- filters ------------------------------------------------------------------


@pytest.mark.parametrize("n", range(1, 11))
def test_filters_orthonormal_and_vanishing_moments(n):
    h, g = daubechies(n)
    L = h.size
    assert L == 2 * n
    assert abs(np.sum(h * h) - 1) < 1e-12 and abs(h.sum() - np.sqrt(2)) < 1e-12
    for shift in range(2, L, 2):
        assert abs(np.dot(h[shift:], h[:-shift])) < 1e-12
    for k in range(n):
        assert abs(np.sum(g * np.arange(L) ** k)) < 1e-8 * max(1, L**k)


def test_filters_match_reference_tables():
    pywt = pytest.importorskip("pywt")
    for n in range(1, 11):
        h, g = daubechies(n)
        ref = pywt.Wavelet(f"db{n}")
        np.testing.assert_allclose(h, ref.rec_lo, atol=1e-14)
        np.testing.assert_allclose(g, ref.rec_hi, atol=1e-14)


def test_single_level_matches_reference_periodization_up_to_shift():
    pywt = pytest.importorskip("pywt")
    x = np.random.default_rng(0).standard_normal(64)
    for n in (2, 4, 6):
        c = dwt1d(np.roll(x, n - 1), WaveletSpec(n, 1))
        a, d = pywt.dwt(x, f"db{n}", mode="periodization")
        np.testing.assert_allclose(c[:32], a, atol=1e-12)
        np.testing.assert_allclose(c[32:], d, atol=1e-12)


def test_spec_validation():
    with pytest.raises(ConfigError):
        WaveletSpec(kind="diamond")
    with pytest.raises(ConfigError):
        WaveletSpec(levels=0)
    with pytest.raises(ConfigError):
        WaveletSpec(vanishing_moments=11)
    with pytest.raises(ConfigError):
        WaveletSpec(boundary="symmetric")


# --- 1D -----------------------------------------------------------------------


def test_haar_constant_signal():
    c = dwt1d([1.0, 1.0, 1.0, 1.0], WaveletSpec(1, 2))
    np.testing.assert_allclose(c, [2.0, 0.0, 0.0, 0.0], atol=1e-15)


def test_zero_signal():
    assert np.all(dwt1d(np.zeros(16), DB4_J2) == 0)


def test_too_many_levels():
    with pytest.raises(DataError, match="too many levels for signal length"):
        dwt1d(np.zeros(7), WaveletSpec(4, 3))


@pytest.mark.parametrize("n,levels", [(16, 2), (16, 4), (13, 3), (30, 2), (9, 3)])
def test_dwt1d_equals_dense_filter_bank_matrix(n, levels):
    x = np.random.default_rng(n).standard_normal(n)
    W = filter_bank_matrix(n, 4, levels)
    np.testing.assert_allclose(dwt1d(x, WaveletSpec(4, levels)), W @ x, atol=1e-13)
    np.testing.assert_allclose(W @ W.T, np.eye(n), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 80), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31))
def test_dwt1d_round_trip_and_energy(n, moments, levels, seed):
    levels = min(levels, int(np.log2(n)))
    spec = WaveletSpec(moments, levels)
    x = np.random.default_rng(seed).standard_normal(n)
    c = dwt1d(x, spec)
    assert np.max(np.abs(idwt1d(c, spec) - x)) < 1e-10
    assert abs(np.linalg.norm(c) - np.linalg.norm(x)) <= 1e-10 * np.linalg.norm(x)


# --- 2D -----------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["square", "rectangular"])
def test_zero_image(kind):
    c, _ = dwt2d(np.zeros((16, 16)), WaveletSpec(4, 2, kind))
    assert np.all(c == 0)


def test_rectangular_equals_kronecker_product():
    Y = np.random.default_rng(5).standard_normal((16, 16))
    spec = WaveletSpec(4, 2, "rectangular")
    W1 = filter_bank_matrix(16, 4, 2)
    W2 = filter_bank_matrix(16, 4, 2)
    vecY = vectorize(ImageGrid(Y)).values
    c, _ = dwt2d(Y, spec)
    np.testing.assert_allclose(c, np.kron(W2, W1) @ vecY, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 32), st.integers(4, 32), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31))
def test_rectangular_kronecker_any_dims(t1, t2, levels, moments, seed):
    levels = min(levels, int(np.log2(min(t1, t2))))
    spec = WaveletSpec(moments, levels, "rectangular")
    Y = np.random.default_rng(seed).standard_normal((t1, t2))
    big = np.kron(transform_matrix_1d(t2, WaveletSpec(moments, levels)),
                  transform_matrix_1d(t1, WaveletSpec(moments, levels)))
    c, _ = dwt2d(Y, spec)
    np.testing.assert_allclose(c, big @ Y.ravel(order="F"), atol=1e-11)


def test_square_and_rectangular_coincide_at_one_level():
    Y = np.random.default_rng(2).standard_normal((12, 10))
    a, _ = dwt2d(Y, WaveletSpec(4, 1, "square"))
    b, _ = dwt2d(Y, WaveletSpec(4, 1, "rectangular"))
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_square_recurses_on_top_left_block():
    Y = np.random.default_rng(4).standard_normal((16, 16))
    one = dwt2d_matrix(Y, WaveletSpec(4, 1))
    two = dwt2d_matrix(Y, WaveletSpec(4, 2))
    np.testing.assert_allclose(two[8:, :], one[8:, :], atol=1e-14)
    np.testing.assert_allclose(two[:8, 8:], one[:8, 8:], atol=1e-14)
    np.testing.assert_allclose(two[:8, :8], dwt2d_matrix(one[:8, :8], WaveletSpec(4, 1)), atol=1e-13)


def test_square_64_round_trip():
    Y = np.random.default_rng(0).standard_normal((64, 64))
    spec = WaveletSpec(4, 3)
    c, _ = dwt2d(Y, spec)
    assert np.max(np.abs(idwt2d(c, spec, Y.shape) - Y)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 4), st.integers(1, 5),
       st.sampled_from(["square", "rectangular"]), st.integers(0, 2**31))
def test_isomorphism_and_parseval(t1, t2, levels, moments, kind, seed):
    levels = min(levels, int(np.log2(min(t1, t2))))
    spec = WaveletSpec(moments, levels, kind)
    Y = np.random.default_rng(seed).standard_normal((t1, t2))
    c, imap = dwt2d(Y, spec)
    assert c.size == t1 * t2 == len(imap)
    assert np.max(np.abs(idwt2d(c, spec, Y.shape) - Y)) < 1e-9
    assert abs(np.sum(c * c) - np.sum(Y * Y)) <= 1e-10 * np.sum(Y * Y)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.sampled_from(["square", "rectangular"]), st.integers(0, 2**31))
def test_linearity(a, b, kind, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((2, 20, 24))
    spec = WaveletSpec(4, 2, kind)
    lhs, _ = dwt2d(a * X + b * Y, spec)
    cx, _ = dwt2d(X, spec)
    cy, _ = dwt2d(Y, spec)
    np.testing.assert_allclose(lhs, a * cx + b * cy, atol=1e-10 * (1 + abs(a) + abs(b)))


def test_batched_transform_matches_single_images():
    stack = np.random.default_rng(9).standard_normal((5, 18, 22))
    spec = WaveletSpec(3, 2)
    batch = dwt2d_matrix(stack, spec)
    for k in range(5):
        np.testing.assert_array_equal(batch[k], dwt2d_matrix(stack[k], spec))


def test_white_noise_stays_white():
    rng = np.random.default_rng(11)
    spec = WaveletSpec(4, 2)
    reps = rng.standard_normal((10_000, 8, 8))
    c, _ = dwt2d(reps, spec)
    var = c.var(axis=0)
    assert np.all(np.abs(var - 1) < 0.05)


def test_odd_dimensions_round_trip():
    Y = np.random.default_rng(1).standard_normal((65, 43))
    spec = WaveletSpec(4, 5)
    c, _ = dwt2d(Y, spec)
    assert c.size == 65 * 43
    assert np.max(np.abs(idwt2d(c, spec, Y.shape) - Y)) < 1e-9


# --- index map ----------------------------------------------------------------


def _counts(imap):
    keys, counts = np.unique(np.column_stack([imap.scale, imap.orientation]), axis=0, return_counts=True)
    return {tuple(k): int(n) for k, n in zip(keys, counts)}


def test_index_map_4x4_one_level():
    imap = coef_index_map((4, 4), WaveletSpec(4, 1))
    assert _counts(imap) == {(1, 1): 4, (1, 2): 4, (1, 3): 4, (2, 0): 4}


def test_index_map_8x8_two_levels():
    imap = coef_index_map((8, 8), WaveletSpec(4, 2))
    assert _counts(imap) == {(1, 1): 16, (1, 2): 16, (1, 3): 16, (2, 1): 4, (2, 2): 4, (2, 3): 4, (3, 0): 4}
    assert len(imap) == 64


def test_index_map_gel_dimensions():
    for kind in ("square", "rectangular"):
        imap = coef_index_map((646, 861), WaveletSpec(4, 6, kind))
        assert len(imap) == 556_206


@pytest.mark.parametrize("kind", ["square", "rectangular"])
def test_index_map_is_a_bijection(kind):
    imap = coef_index_map((37, 50), WaveletSpec(4, 3, kind))
    triples = set(imap)
    assert len(triples) == 37 * 50
    for key, n in _counts(imap).items():
        sel = (imap.scale == key[0]) & (imap.orientation == key[1])
        assert sorted(imap.location[sel].tolist()) == list(range(1, n + 1))


def test_index_map_labels_square_blocks():
    spec = WaveletSpec(4, 1)
    imap = coef_index_map((4, 6), spec)
    # scaling block is the top-left 2x3, row details the top-right
    blocks = np.reshape(imap.orientation, (4, 6), order="F")
    assert blocks[:2, :3].tolist() == [[0] * 3] * 2
    assert blocks[:2, 3:].tolist() == [[1] * 3] * 2
    assert blocks[2:, :3].tolist() == [[2] * 3] * 2
    assert blocks[2:, 3:].tolist() == [[3] * 3] * 2
    assert imap.is_scaling().sum() == 6


def test_rectangular_scaling_marker():
    imap = coef_index_map((16, 16), WaveletSpec(4, 2, "rectangular"))
    assert imap.is_scaling().sum() == 16
    assert set(imap.group_keys()) == {(a, b) for a in (1, 2, 3) for b in (1, 2, 3)}


def test_max_levels():
    assert max_levels((646, 861)) == 9
    assert max_levels((64, 64)) == 6


# --- CoefSet and cache ---------------------------------------------------------


def test_coefset_energy_and_restrict(tmp_path):
    stack = np.random.default_rng(3).standard_normal((4, 16, 12))
    spec = WaveletSpec(4, 2)
    cs = transform_images(stack, spec)
    np.testing.assert_allclose((cs.coefs**2).sum(axis=1), (stack**2).sum(axis=(1, 2)), rtol=1e-12)
    np.testing.assert_allclose(cs.images(), stack, atol=1e-12)
    sub = cs.restrict([0, 5, 17])
    assert sub.coefs.shape == (4, 3)
    assert np.count_nonzero(sub.full()[:, 1:5]) == 0
    for obj in (cs, sub):
        path = tmp_path / "c.bin"
        write_coefset(path, obj)
        back = read_coefset(path)
        assert back.coefs.tobytes() == obj.coefs.tobytes()
        assert back.index_map == obj.index_map and back.spec == spec and back.dims == (16, 12)
        np.testing.assert_array_equal(back.retained, obj.retained)


def test_coefset_cache_rejects_corruption(tmp_path):
    cs = transform_images(np.ones((2, 8, 8)), WaveletSpec(4, 1))
    path = tmp_path / "c.bin"
    write_coefset(path, cs)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_coefset(path)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataError):
        read_coefset(path)


def test_coefset_shape_checks():
    imap = coef_index_map((4, 4), WaveletSpec(1, 1))
    with pytest.raises(DataError):
        CoefSet(np.zeros((2, 15)), imap, (4, 4), WaveletSpec(1, 1))
    with pytest.raises(DataError):
        CoefSet(np.zeros((2, 3)), imap, (4, 4), WaveletSpec(1, 1), positions=[0, 1])
