import math

import numpy as np
import pytest

from gtakit import attn, groups, reference, reps
from gtakit import diffcore as dc
from gtakit.diffcore import Tensor

MIXED = reps.preset_spec("mixed-24")
MSN = reps.preset_spec("msn-hard")
KRON = reps.kronecker_spec(2)


def tokens(rng, n, d, m=None):
    m = n if m is None else m
    return rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))


def poses(rng, n):
    return [groups.sample_product(rng) for _ in range(n)]


def test_vanilla_matches_loop(rng):
    Q, K, V = tokens(rng, 4, 6, 7)
    got = attn.vanilla_attention(Tensor(Q), Tensor(K), Tensor(V)).data
    np.testing.assert_allclose(got, reference.vanilla_loop(Q, K, V), atol=1e-12)


@pytest.mark.parametrize("spec", [MIXED, MSN], ids=["mixed-24", "msn-hard"])
def test_gta_matches_definitional(rng, spec):
    Q, K, V = tokens(rng, 5, spec.total_dim)
    g = poses(rng, 5)
    got = attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(spec, g)).data
    np.testing.assert_allclose(got, reference.gta_definitional(Q, K, V, spec, g), atol=1e-10)


def test_gta_cross_attention_matches_definitional(rng):
    Q, K, V = tokens(rng, 3, 24, 6)
    gq, gk = poses(rng, 3), poses(rng, 6)
    got = attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(MIXED, gq),
                             reps.build_rep(MIXED, gk)).data
    np.testing.assert_allclose(got, reference.gta_definitional(Q, K, V, MIXED, gq, gk), atol=1e-10)


def test_gta_euclid_matches_definitional(rng):
    Q, K, V = tokens(rng, 5, 24)
    g = poses(rng, 5)
    got = attn.gta_euclid_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(MIXED, g)).data
    np.testing.assert_allclose(got, reference.gta_euclid_definitional(Q, K, V, MIXED, g), atol=1e-10)


def test_gta_kronecker_matches_definitional(rng):
    Q, K, V = tokens(rng, 4, KRON.total_dim)
    g = poses(rng, 4)
    got = attn.gta_kronecker_attention(Tensor(Q), Tensor(K), Tensor(V),
                                       reps.build_rep_kronecker(KRON, g)).data
    np.testing.assert_allclose(got, reference.gta_definitional(Q, K, V, KRON, g), atol=1e-10)


def test_kronecker_rejects_plain_rep(rng):
    Q, K, V = tokens(rng, 2, 24)
    with pytest.raises(TypeError):
        attn.gta_kronecker_attention(Tensor(Q), Tensor(K), Tensor(V),
                                     reps.build_rep(MIXED, poses(rng, 2)))


def test_ape_matches_loop(rng):
    Q, K, V = tokens(rng, 5, 8)
    E = rng.standard_normal((5, 3))
    W = [rng.standard_normal((3, 8)) for _ in range(3)]
    got = attn.ape_attention(Tensor(Q), Tensor(K), Tensor(V), Tensor(E), [Tensor(w) for w in W]).data
    np.testing.assert_allclose(got, reference.ape_loop(Q, K, V, E, *W), atol=1e-12)


def test_rpe_bias_matches_loop(rng):
    Q, K, V = tokens(rng, 5, 12)
    R = groups.sample_rotations(rng, 5)
    b = [rng.standard_normal(9) for _ in range(3)]
    got = attn.rpe_bias_attention(Tensor(Q), Tensor(K), Tensor(V),
                                  attn.RpeBias(*(Tensor(x) for x in b)), R).data
    np.testing.assert_allclose(got, reference.rpe_bias_loop(Q, K, V, *b, R), atol=1e-12)


def test_rpe_identity_bias_adds_rotation_trace(rng):
    # identity-initialized biases add tr(R_i R_j^T) to each logit
    n, d = 4, 6
    Q, K, V = tokens(rng, n, d)
    R = groups.sample_rotations(rng, n)
    rec = []
    attn.rpe_bias_attention(Tensor(Q), Tensor(K), Tensor(V), attn.RpeBias.identity_init(np.float64),
                            R, record=rec)
    logits = (Q @ K.T + np.einsum("iab,jab->ij", R, R)) / math.sqrt(d)
    want = np.exp(logits - logits.max(-1, keepdims=True))
    want /= want.sum(-1, keepdims=True)
    np.testing.assert_allclose(rec[0], want, atol=1e-12)


def test_rpe_is_invariant_to_global_rotation(rng):
    Q, K, V = tokens(rng, 5, 12)
    R = groups.sample_rotations(rng, 5)
    H = groups.sample_rotation(rng).matrix()
    b = attn.RpeBias(*(Tensor(rng.standard_normal(9)) for _ in range(3)))
    a = attn.rpe_bias_attention(Tensor(Q), Tensor(K), Tensor(V), b, R).data
    c = attn.rpe_bias_attention(Tensor(Q), Tensor(K), Tensor(V), b, R @ H).data
    np.testing.assert_allclose(a, c, atol=1e-12)


def test_rpe_value_bias_channels(rng):
    Q, K, V = tokens(rng, 3, 6)
    R = groups.sample_rotations(rng, 3)
    feats, extra = attn.rpe_bias_attention(Tensor(Q), Tensor(K), Tensor(V),
                                           attn.RpeBias.identity_init(np.float64), R,
                                           return_bias=True)
    assert feats.shape == (3, 6) and extra.shape == (3, 9)
    # with all rotations equal every value bias maps back to vec(I)
    _, same = attn.rpe_bias_attention(Tensor(Q), Tensor(K), Tensor(V),
                                      attn.RpeBias.identity_init(np.float64),
                                      np.repeat(R[:1], 3, axis=0), return_bias=True)
    np.testing.assert_allclose(same.data, np.tile(np.eye(3).ravel(), (3, 1)), atol=1e-12)


def test_rpe_bias_length_is_checked():
    with pytest.raises(ValueError):
        attn.RpeBias(Tensor(np.zeros(8)), Tensor(np.zeros(9)), Tensor(np.zeros(9)))


@pytest.mark.parametrize("variant", ["gta", "gta_kron"])
def test_invariance_under_right_action(rng, variant):
    spec = MSN if variant == "gta" else reps.kronecker_spec(6)
    Q, K, V = tokens(rng, 6, spec.total_dim)
    g = poses(rng, 6)
    h = groups.sample_product(rng)
    gh = [groups.compose(x, h) for x in g]
    build = reps.build_rep if variant == "gta" else reps.build_rep_kronecker
    fn = attn.gta_attention if variant == "gta" else attn.gta_kronecker_attention
    a = fn(Tensor(Q), Tensor(K), Tensor(V), build(spec, g)).data
    b = fn(Tensor(Q), Tensor(K), Tensor(V), build(spec, gh)).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_euclid_invariance_for_rotation_only_shift(rng):
    from gtakit.checks import translation_free

    Q, K, V = tokens(rng, 6, MSN.total_dim)
    g = poses(rng, 6)
    h = translation_free(groups.sample_product(rng))
    gh = [groups.compose(x, h) for x in g]
    a = attn.gta_euclid_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(MSN, g)).data
    b = attn.gta_euclid_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(MSN, gh)).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_identity_geometry_reduces_to_vanilla(rng):
    Q, K, V = tokens(rng, 4, 24)
    g = [groups.ProductElement.identity()] * 4
    a = attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(MIXED, g)).data
    np.testing.assert_allclose(a, reference.vanilla_loop(Q, K, V), atol=1e-12)


def test_query_key_only_transform(rng):
    Q, K, V = tokens(rng, 4, 24)
    g = poses(rng, 4)
    P = reps.build_rep(MIXED, g)
    got = attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), P, transform_values=False).data
    dense = [reference.dense_rep(MIXED, x) for x in g]
    q = np.stack([D.T @ x for D, x in zip(dense, Q)])
    k = np.stack([np.linalg.inv(D) @ x for D, x in zip(dense, K)])
    np.testing.assert_allclose(got, reference.vanilla_loop(q, k, V), atol=1e-10)


def test_attention_rows_sum_to_one(rng):
    Q, K, V = tokens(rng, 5, 24, 7)
    rec = []
    attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(MIXED, poses(rng, 5)),
                       reps.build_rep(MIXED, poses(rng, 7)), record=rec)
    assert rec[0].shape == (5, 7)
    np.testing.assert_allclose(rec[0].sum(-1), 1.0, atol=1e-12)
    assert np.all(rec[0] >= 0)


def test_batched_matches_unbatched(rng):
    Q, K, V = (rng.standard_normal((3, 4, 24)) for _ in range(3))
    g = [poses(rng, 4) for _ in range(3)]
    P = reps.stack_reps([reps.build_rep(MIXED, x) for x in g])
    got = attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), P).data
    for b in range(3):
        one = attn.gta_attention(Tensor(Q[b]), Tensor(K[b]), Tensor(V[b]),
                                 reps.build_rep(MIXED, g[b])).data
        np.testing.assert_allclose(got[b], one, atol=1e-12)


def test_shape_errors(rng):
    Q, K, V = tokens(rng, 3, 6)
    with pytest.raises(dc.ShapeError):
        attn.vanilla_attention(Tensor(Q), Tensor(K[:, :5]), Tensor(V))
    with pytest.raises(dc.ShapeError):
        attn.vanilla_attention(Tensor(Q), Tensor(K), Tensor(V[:2]))


def test_config_validation():
    with pytest.raises(ValueError):
        attn.AttnConfig(variant="nope")
    with pytest.raises(ValueError):
        attn.AttnConfig(variant="gta")  # no rep spec
    with pytest.raises(reps.DimensionMismatchError):
        attn.AttnConfig(variant="gta", head_dim=30, rep_spec=MIXED)


@pytest.mark.parametrize("variant", ["vanilla", "gta", "gta_euclid", "rpe_bias"])
def test_multi_head_equals_per_head_loop(rng, variant):
    h, hd, n = 2, 24, 4
    spec = MIXED if variant.startswith("gta") else None
    mha = attn.MultiHeadAttention(h * hd, attn.AttnConfig(h, hd, variant, spec), rng, np.float64)
    x = rng.standard_normal((n, h * hd))
    g = poses(rng, n)
    if variant == "rpe_bias":
        geom = np.stack([e.c.rotation.matrix() for e in g])
    elif spec is not None:
        geom = reps.build_rep(spec, g)
    else:
        geom = None
    rec = []
    got = mha(Tensor(x), geom, record=rec).data
    p = {k: v.data for k, v in mha.params.items()}
    heads = []
    for j in range(h):
        sl = slice(j * hd, (j + 1) * hd)
        Q, K, V = (x @ p[w][:, sl] for w in ("wq", "wk", "wv"))
        if variant == "vanilla":
            o = reference.vanilla_loop(Q, K, V)
        elif variant == "gta":
            o = reference.gta_definitional(Q, K, V, spec, g)
        elif variant == "gta_euclid":
            o = reference.gta_euclid_definitional(Q, K, V, spec, g)
        else:
            o = reference.rpe_bias_loop(Q, K, V, p["b_q"][j], p["b_k"][j], p["b_v"][j], geom)
        heads.append(o)
    want = np.concatenate(heads, -1) @ p["wo"] + p["bo"]
    np.testing.assert_allclose(got, want, atol=1e-10)
    assert rec[0].shape == (h, n, n)


def test_multi_head_width_mismatch(rng):
    with pytest.raises(ValueError):
        attn.MultiHeadAttention(50, attn.AttnConfig(2, 24, "vanilla"), rng)


def test_rpe_keep_value_bias_widens_output_projection(rng):
    cfg = attn.AttnConfig(2, 12, "rpe_bias", rpe_keep_value_bias=True)
    mha = attn.MultiHeadAttention(24, cfg, rng)
    assert mha.params["wo"].shape == (24 + 18, 24)
    R = groups.sample_rotations(rng, 3)
    assert mha(Tensor(rng.standard_normal((3, 24)).astype(np.float32)), R).shape == (3, 24)
    plain = attn.MultiHeadAttention(24, attn.AttnConfig(2, 12, "rpe_bias"), rng)
    assert plain.params["wo"].shape == (24, 24)


def test_attn_record(tmp_path, rng):
    rec = attn.AttnRecord()
    w = rng.random((2, 3, 3))
    rec.add(0, w)
    rec.add(1, w[:1])
    assert rec.layers() == [0, 1]
    np.testing.assert_allclose(rec.head_average(0), w.mean(0))
    files = rec.dump_csv(tmp_path)
    assert [f.name for f in files] == ["attn_layer0_head0.csv", "attn_layer0_head1.csv",
                                       "attn_layer1_head0.csv"]
    lines = files[1].read_text().splitlines()
    assert lines[0] == "row,col,weight" and len(lines) == 10
    assert float(lines[1].split(",")[2]) == w[1, 0, 0]
