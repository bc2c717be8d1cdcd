import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gtakit import groups, reps
from gtakit.groups import ProductElement, Se3Pose, So2Angle, So3Rotation

seeds = st.integers(0, 2**32 - 1)


def rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def quad_features(x):
    """Degree-2 harmonics in the basis order (xy, yz, 3z^2 - r^2, xz, x^2 - y^2)."""
    X, Y, Z = x
    s2 = math.sqrt(2.0)
    return np.array([s2 * X * Y, s2 * Y * Z, (2 * Z * Z - X * X - Y * Y) / math.sqrt(6),
                     s2 * X * Z, (X * X - Y * Y) / s2])


# ---------------------------------------------------------------- blocks

def test_so2_block_frozen():
    np.testing.assert_allclose(reps.so2_block(So2Angle(math.pi / 2), 1.0),
                               [[0, -1], [1, 0]], atol=1e-15)
    # frequency 1/2 at theta = pi gives a quarter turn
    np.testing.assert_allclose(reps.so2_block(math.pi, 0.5), [[0, -1], [1, 0]], atol=1e-15)


def test_so2_block_vectorized():
    th = np.array([[0.1, 0.2], [0.3, 0.4]])
    out = reps.so2_block(th, 2.0)
    assert out.shape == (2, 2, 2, 2)
    np.testing.assert_allclose(out[1, 0], reps.so2_block(0.3, 2.0))


def test_so2_block_rejects_bad_frequency():
    with pytest.raises(ValueError):
        reps.so2_block(0.1, 0.0)


def test_cam_block_frozen():
    M = reps.cam_block(Se3Pose(rz(0.0), [1, 2, 3]))
    np.testing.assert_array_equal(M, [[1, 0, 0, 1], [0, 1, 0, 2], [0, 0, 1, 3], [0, 0, 0, 1]])


def test_wigner_l1_is_rotation():
    R = rz(0.4)
    np.testing.assert_array_equal(reps.wigner_d(So3Rotation(R), 1), R)


def test_wigner_l2_frozen_quarter_turn():
    # hand derivation: (x, y, z) -> (-y, x, z) flips xy, x^2-y^2 and swaps yz/xz
    expect = np.array([[-1, 0, 0, 0, 0], [0, 0, 0, 1, 0], [0, 0, 1, 0, 0],
                       [0, -1, 0, 0, 0], [0, 0, 0, 0, -1]], dtype=float)
    np.testing.assert_allclose(reps.wigner_d(rz(math.pi / 2), 2), expect, atol=1e-15)


@given(seeds)
def test_wigner_character(seed):
    R = groups.sample_rotation(np.random.default_rng(seed)).r
    angle = math.acos(np.clip((np.trace(R) - 1) / 2, -1, 1))
    for l in (1, 2):
        chi = 1 + 2 * sum(math.cos(m * angle) for m in range(1, l + 1))
        assert np.trace(reps.wigner_d(R, l)) == pytest.approx(chi, abs=1e-10)


@given(seeds)
def test_wigner_l2_equivariance(seed):
    rng = np.random.default_rng(seed)
    R = groups.sample_rotation(rng).r
    x = rng.standard_normal(3)
    np.testing.assert_allclose(quad_features(R @ x), reps.wigner_d(R, 2) @ quad_features(x),
                               atol=1e-12)


def test_wigner_rejects_degree_3():
    with pytest.raises(ValueError):
        reps.wigner_d(np.eye(3), 3)


# ---------------------------------------------------------------- specs

def test_msn_hard_dimension_and_layout():
    spec = reps.preset_spec("msn-hard")
    assert spec.total_dim == 12 * 4 + 3 * 8 + 12 + 12 == 96
    kinds = [b.kind for b in spec.blocks]
    assert kinds[:12] == ["cam"] * 12
    assert spec.offsets[12] == 48          # rotation blocks start after 48 cam dims
    assert spec.offsets[kinds.index("so2_h")] == 72
    freqs = [b.param for b in spec.blocks if b.kind == "so2_w"]
    assert freqs == [1, 1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32]


def test_presets_without_so3():
    assert reps.preset_spec("msn-hard-no-so3").total_dim == 96
    assert reps.preset_spec("clevr-tr-no-so3").total_dim == 64


def test_clevr_tr_row_is_inconsistent():
    # {8, 3, 1, 1} with 4 frequencies per axis gives 32 + 24 + 8 + 8 = 72
    with pytest.raises(reps.DimensionMismatchError, match="72"):
        reps.preset_spec("clevr-tr")


def test_kronecker_dimension():
    assert reps.kronecker_spec(4).total_dim == 4 * 16 == 64
    with pytest.raises(reps.DimensionMismatchError):
        reps.kronecker_spec(4, d=96)


def test_strategy_reproduces_msn_hard():
    assert reps.strategy_spec(96).blocks == reps.preset_spec("msn-hard").blocks
    s64 = reps.strategy_spec(64)
    assert s64.total_dim == 64
    assert sum(b.kind == "cam" for b in s64.blocks) == 8


def test_strategy_pads_remainder_with_identity():
    spec = reps.strategy_spec(100)
    assert spec.total_dim == 100
    assert spec.blocks[-1] == reps.RepBlockSpec("trivial", 4)


def test_rotation_stack():
    assert len(reps.rotation_stack_spec(126).blocks) == 42
    spec = reps.rotation_stack_spec(128)
    assert spec.total_dim == 128 and spec.blocks[-1].kind == "trivial"


def test_unknown_preset():
    with pytest.raises(KeyError):
        reps.preset_spec("nope")


def test_build_rep_checks_dimension():
    with pytest.raises(reps.DimensionMismatchError):
        reps.build_rep(reps.preset_spec("msn-hard"), ProductElement.identity(), d=64)


# ---------------------------------------------------------------- representations

@given(seeds)
def test_homomorphism_msn_hard(seed):
    rng = np.random.default_rng(seed)
    a, b = groups.sample_product(rng), groups.sample_product(rng)
    assert reps.homomorphism_error(reps.preset_spec("msn-hard"), a, b) < 1e-9


@given(seeds)
def test_homomorphism_kronecker(seed):
    rng = np.random.default_rng(seed)
    a, b = groups.sample_product(rng), groups.sample_product(rng)
    assert reps.homomorphism_error(reps.kronecker_spec(4), a, b) < 1e-9


def test_fractional_frequency_needs_unwrapped_angles():
    # 1.5pi + 1.5pi wraps to pi; at f = 1/2 the wrapped angle gives the wrong sign
    a = So2Angle(1.5 * math.pi)
    ab = groups.compose(a, a)
    lhs = reps.so2_block(a, 0.5) @ reps.so2_block(a, 0.5)
    np.testing.assert_allclose(lhs, reps.so2_block(ab, 0.5), atol=1e-14)
    assert np.abs(lhs - reps.so2_block(ab.theta, 0.5)).max() > 1.0


def test_identity_maps_to_identity():
    P = reps.build_rep(reps.preset_spec("msn-hard"), ProductElement.identity())
    np.testing.assert_allclose(P.dense(), np.eye(96), atol=1e-15)


def test_dense_nonzeros_inside_blocks(rng):
    spec = reps.preset_spec("msn-hard")
    D = reps.build_rep(spec, groups.sample_product(rng)).dense()
    mask = np.zeros((96, 96), bool)
    for off, b in zip(spec.offsets, spec.blocks):
        n = b.block_dim
        mask[off:off + n, off:off + n] = True
    assert np.all(D[~mask] == 0)


def test_inverse_and_transpose(rng):
    spec = reps.preset_spec("msn-hard")
    P = reps.build_rep(spec, [groups.sample_product(rng) for _ in range(3)])
    D = P.dense()
    np.testing.assert_allclose(P.inverse().dense(), np.linalg.inv(D), atol=1e-12)
    np.testing.assert_array_equal(P.transpose().dense(), np.swapaxes(D, -1, -2))


@pytest.mark.parametrize("mode", reps.MODES)
@pytest.mark.parametrize("name", ["msn-hard", "mixed-24", "rotstack-128"])
def test_rep_apply_matches_dense(name, mode, rng):
    spec = reps.preset_spec(name)
    n, d = 5, spec.total_dim
    P = reps.build_rep(spec, [groups.sample_product(rng) for _ in range(n)])
    X = rng.standard_normal((n, d))
    D = P.dense()
    M = {"plain": D, "transpose": np.swapaxes(D, -1, -2), "inverse": np.linalg.inv(D)}[mode]
    want = np.einsum("nij,nj->ni", M, X)
    np.testing.assert_allclose(reps.rep_apply(P, X, mode), want, atol=1e-10)


@pytest.mark.parametrize("mode", reps.MODES)
def test_kronecker_apply_matches_np_kron(mode, rng):
    spec = reps.kronecker_spec(4)
    gs = [groups.sample_product(rng) for _ in range(4)]
    P = reps.build_rep_kronecker(spec, gs)
    X = rng.standard_normal((4, 64))
    for i, g in enumerate(gs):
        kr = reps.build_rep_kronecker(spec, g)
        D = np.kron(kr.left.dense(), kr.right.dense())
        M = {"plain": D, "transpose": D.T, "inverse": np.linalg.inv(D)}[mode]
        np.testing.assert_allclose(reps.rep_apply(P, X, mode)[i], M @ X[i], atol=1e-10)


def test_rep_apply_broadcasts_over_batch(rng):
    spec = reps.preset_spec("mixed-24")
    P = reps.build_rep(spec, [groups.sample_product(rng) for _ in range(4)])
    X = rng.standard_normal((3, 4, 24))
    out = reps.rep_apply(P, X)
    for b in range(3):
        np.testing.assert_allclose(out[b], reps.rep_apply(P, X[b]), atol=1e-14)


def test_rep_apply_float32_stays_float32(rng):
    spec = reps.preset_spec("rotstack-126")
    P = reps.build_rep_arrays(spec, R=groups.sample_rotations(rng, 6))
    X = rng.standard_normal((6, 126)).astype(np.float32)
    assert reps.rep_apply(P, X).dtype == np.float32


def test_trivial_block_copied_and_not_counted(rng):
    spec = reps.RepSpec((reps.RepBlockSpec("rot", 1), reps.RepBlockSpec("trivial", 5)))
    P = reps.build_rep(spec, groups.sample_product(rng))
    X = rng.standard_normal((1, 8))
    c = reps.FlopCounter()
    out = reps.rep_apply(P, X, counter=c)
    np.testing.assert_array_equal(out[:, 3:], X[:, 3:])
    assert c.madds == 9


def test_flop_count_linear_in_d(rng):
    counts = []
    for d in (64, 128):
        spec = reps.RepSpec((reps.RepBlockSpec("cam"),) * (d // 8) + (reps.RepBlockSpec("rot", 1),
                                                                     reps.RepBlockSpec("rot", 2)) * (d // 16))
        n = 10
        P = reps.build_rep(spec, [groups.sample_product(rng) for _ in range(n)])
        c = reps.FlopCounter()
        reps.rep_apply(P, rng.standard_normal((n, d)), counter=c)
        counts.append(c.madds)
    assert counts[1] / counts[0] == pytest.approx(2.0)


def test_stack_reps_mixed_uniform_shapes(rng):
    spec = reps.preset_spec("msn-hard")
    P = reps.stack_reps([reps.build_rep(spec, groups.sample_product(rng)) for _ in range(3)])
    assert P.batch_shape == (3,)
    assert P.dense().shape == (3, 96, 96)


def test_rep_matrices_are_blockwise_orthogonal(rng):
    spec = reps.preset_spec("msn-hard-no-so3")
    g = ProductElement(Se3Pose(groups.sample_rotation(rng), np.zeros(3)), So2Angle(1.0), So2Angle(2.0))
    D = reps.build_rep(spec, g).dense()
    np.testing.assert_allclose(D @ D.T, np.eye(96), atol=1e-12)
