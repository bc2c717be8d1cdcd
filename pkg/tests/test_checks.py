import numpy as np
import pytest

from gtakit import checks, reps


def test_result_line_and_relation():
    ok = checks.CheckResult("reps", "x", 1e-12, 1e-9)
    assert ok.passed and ok.line().startswith("PASS  reps")
    assert not checks.CheckResult("reps", "x", 2e-9, 1e-9).passed
    assert checks.CheckResult("attn", "moves", 0.5, 1e-3, ">").passed
    assert not checks.CheckResult("attn", "nan", float("nan"), 1e-3).passed


def test_groups_and_reps_suites_pass():
    results = checks.run_suites(["groups", "reps"], seed=3)
    assert results and all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_unknown_suite():
    with pytest.raises(KeyError):
        checks.run_suites(["nope"])


def test_homomorphism_catches_sign_error(monkeypatch):
    real = reps.wigner_d

    def broken(r, l):
        D = np.array(real(r, l), copy=True)
        if l == 2:
            D[..., 0, :] *= -1  # flip one basis vector on the left only
        return D

    monkeypatch.setattr(reps, "wigner_d", broken)
    errs = checks.homomorphism_errors(np.random.default_rng(0), 5)
    assert errs["wigner_d l=2"] > 1e-3
    assert errs["wigner_d l=1"] < 1e-9


def test_invariance_check_catches_missing_inverse(monkeypatch):
    from gtakit import attn
    from gtakit import diffcore as dc

    real = dc.rep_apply_node

    def wrong(P, X, mode, counter=None):
        return real(P, X, "plain" if mode == "inverse" else mode, counter)

    monkeypatch.setattr(attn.dc, "rep_apply_node", wrong)
    errs = checks.invariance_errors(np.random.default_rng(0), 2)
    assert errs["gta"] > 1e-3


def test_euclid_with_camera_blocks_needs_translation_free_shift():
    # homogeneous camera blocks are not isometries, so a full shift breaks the distance form
    from gtakit import attn, groups
    from gtakit.diffcore import Tensor

    rng = np.random.default_rng(0)
    spec = reps.preset_spec("msn-hard")
    Q, K, V = (rng.standard_normal((4, 96)) for _ in range(3))
    g = [groups.sample_product(rng) for _ in range(4)]
    h = groups.sample_product(rng, scale=3.0)
    a = attn.gta_euclid_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(spec, g)).data
    b = attn.gta_euclid_attention(Tensor(Q), Tensor(K), Tensor(V),
                                  reps.build_rep(spec, [groups.compose(x, h) for x in g])).data
    assert np.abs(a - b).max() > 1e-6
