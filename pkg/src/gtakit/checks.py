"""Property suites behind ``gtakit check`` (also reused by the acceptance tests).

Each check reports the worst error observed next to its tolerance. A check
with ``relation=">"`` passes when the observed value exceeds the bound (used
for "this must change" checks).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import attn, groups, reference, reps
from . import diffcore as dc
from .diffcore import Tensor
from .groups import ProductElement, Se3Pose, So2Angle

SUITES = ("groups", "reps", "attn", "grads")


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    tol: float
    relation: str = "<"
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.value):
            return False
        return self.value < self.tol if self.relation == "<" else self.value > self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.suite:6s} {self.name:40s} {self.value:.3e} "
                f"{self.relation} {self.tol:.0e}")


def _timed(suite: str, name: str, tol: float, fn: Callable[[], float],
           relation: str = "<") -> CheckResult:
    t0 = time.perf_counter()
    value = float(fn())
    return CheckResult(suite, name, value, tol, relation, time.perf_counter() - t0)


# ---------------------------------------------------------------- groups

def _as_matrix(g) -> np.ndarray:
    if isinstance(g, ProductElement):
        m = np.zeros((8, 8))
        m[:4, :4] = g.c.matrix()
        m[4:6, 4:6] = g.theta_h.matrix()
        m[6:, 6:] = g.theta_w.matrix()
        return m
    return g.matrix()


def group_axiom_error(sample: Callable, rng: np.random.Generator, n: int) -> float:
    """Worst violation of associativity, inverses and identity, measured on matrices."""
    worst = 0.0
    for _ in range(n):
        a, b, c = sample(rng), sample(rng), sample(rng)
        e = groups.identity_like(a)
        lhs = groups.compose(groups.compose(a, b), c)
        rhs = groups.compose(a, groups.compose(b, c))
        errs = [np.abs(_as_matrix(lhs) - _as_matrix(rhs)).max(),
                np.abs(_as_matrix(groups.compose(a, groups.inverse(a))) - _as_matrix(e)).max(),
                np.abs(_as_matrix(groups.compose(e, a)) - _as_matrix(a)).max(),
                np.abs(_as_matrix(a) @ _as_matrix(b) - _as_matrix(groups.compose(a, b))).max()]
        worst = max(worst, *errs)
    return worst


def suite_groups(rng: np.random.Generator, n: int = 200) -> list[CheckResult]:
    samplers = {"so2": groups.sample_angle, "so3": groups.sample_rotation,
                "se3": groups.sample_pose, "product": groups.sample_product}
    out = [_timed("groups", f"axioms {k}", 1e-9, lambda s=s: group_axiom_error(s, rng, n))
           for k, s in samplers.items()]

    def validity():
        R = groups.sample_rotations(rng, n)
        det = np.abs(np.linalg.det(R) - 1).max()
        orth = np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3)).max()
        return max(det, orth)

    out.append(_timed("groups", "sampled rotations in SO(3)", 1e-9, validity))
    return out


# ---------------------------------------------------------------- reps

SO2_FREQS = (1.0, 0.5, 0.25, 0.125, 0.0625)


def homomorphism_errors(rng: np.random.Generator, n_pairs: int) -> dict:
    """Worst ``|rho(a) rho(b) - rho(ab)|`` per representation family."""
    msn = reps.preset_spec("msn-hard")
    kspec = reps.kronecker_spec(4)
    worst = {k: 0.0 for k in ("so2_block", "cam_block", "wigner_d l=1", "wigner_d l=2",
                              "build_rep msn-hard (96)", "build_rep_kronecker (64)")}

    def upd(key, A, B, AB):
        worst[key] = max(worst[key], float(np.abs(A @ B - AB).max()))

    for _ in range(n_pairs):
        a, b = groups.sample_product(rng), groups.sample_product(rng)
        ab = groups.compose(a, b)
        for f in SO2_FREQS:
            upd("so2_block", reps.so2_block(a.theta_h, f), reps.so2_block(b.theta_h, f),
                reps.so2_block(ab.theta_h, f))
        upd("cam_block", reps.cam_block(a.c), reps.cam_block(b.c), reps.cam_block(ab.c))
        for l in (1, 2):
            upd(f"wigner_d l={l}", reps.wigner_d(a.c.rotation, l), reps.wigner_d(b.c.rotation, l),
                reps.wigner_d(ab.c.rotation, l))
        upd("build_rep msn-hard (96)", reps.build_rep(msn, a).dense(), reps.build_rep(msn, b).dense(),
            reps.build_rep(msn, ab).dense())
        upd("build_rep_kronecker (64)", reps.build_rep_kronecker(kspec, a).dense(),
            reps.build_rep_kronecker(kspec, b).dense(), reps.build_rep_kronecker(kspec, ab).dense())
    return worst


def orthogonality_error(rng: np.random.Generator, n: int) -> float:
    """Worst ``|D D^T - I|`` and ``|det D - 1|`` over rot and so2 blocks."""
    worst = 0.0
    R = groups.sample_rotations(rng, n)
    th = rng.uniform(-20, 20, size=n)
    blocks = [reps.wigner_d(R, 1), reps.wigner_d(R, 2)]
    blocks += [reps.so2_block(th, f) for f in SO2_FREQS]
    for D in blocks:
        eye = np.eye(D.shape[-1])
        worst = max(worst, np.abs(D @ np.swapaxes(D, -1, -2) - eye).max(),
                    np.abs(np.linalg.det(D) - 1).max())
    return worst


def suite_reps(rng: np.random.Generator, n_pairs: int = 200) -> list[CheckResult]:
    t0 = time.perf_counter()
    errs = homomorphism_errors(rng, n_pairs)
    dt = time.perf_counter() - t0
    out = [CheckResult("reps", f"homomorphism {k}", v, 1e-9, "<", dt / len(errs))
           for k, v in errs.items()]
    out.append(_timed("reps", "orthogonality + det (rot, so2)", 1e-9,
                      lambda: orthogonality_error(rng, n_pairs)))
    return out


# ---------------------------------------------------------------- attn

def _random_tokens(rng, n, d, m=None):
    m = n if m is None else m
    return rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))


def translation_free(g: ProductElement) -> ProductElement:
    return ProductElement(Se3Pose(g.c.rotation, np.zeros(3)), g.theta_h, g.theta_w)


def efficient_vs_definitional(rng: np.random.Generator, n_inst: int) -> dict:
    """Worst gap between the token-wise forms and the per-pair double loops."""
    specs = {"gta": [reps.preset_spec("mixed-24"), reps.preset_spec("msn-hard")],
             "gta_euclid": [reps.preset_spec("mixed-24"), reps.preset_spec("msn-hard")],
             "gta_kron": [reps.kronecker_spec(2), reps.kronecker_spec(6)]}
    worst = {k: 0.0 for k in specs}
    for k in range(n_inst):
        n = int(rng.integers(2, 9))
        for variant, pair in specs.items():
            spec = pair[k % 2]
            d = spec.total_dim
            Q, K, V = _random_tokens(rng, n, d)
            g = [groups.sample_product(rng) for _ in range(n)]
            if variant == "gta_kron":
                P = reps.build_rep_kronecker(spec, g)
                got = attn.gta_kronecker_attention(Tensor(Q), Tensor(K), Tensor(V), P).data
                want = reference.gta_definitional(Q, K, V, spec, g)
            elif variant == "gta":
                P = reps.build_rep(spec, g)
                got = attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), P).data
                want = reference.gta_definitional(Q, K, V, spec, g)
            else:
                P = reps.build_rep(spec, g)
                got = attn.gta_euclid_attention(Tensor(Q), Tensor(K), Tensor(V), P).data
                want = reference.gta_euclid_definitional(Q, K, V, spec, g)
            worst[variant] = max(worst[variant], float(np.abs(got - want).max()))
    return worst


def ape_embedding(g: ProductElement) -> np.ndarray:
    """20-dim absolute code: flattened 4x4 pose and (cos, sin) of both angles."""
    th, tw = g.theta_h.theta, g.theta_w.theta
    return np.concatenate([g.c.matrix().ravel(), [math.cos(th), math.sin(th), math.cos(tw),
                                                  math.sin(tw)]])


def invariance_errors(rng: np.random.Generator, n_inst: int) -> dict:
    """Output change under ``g_i -> g_i h`` for a common random ``h``.

    Distances are only preserved by orthogonal blocks, so the Euclidean
    variant is checked twice: with an all-orthogonal spec under a full ``h``,
    and with the camera-block spec under a translation-free ``h``.
    """
    msn = reps.preset_spec("msn-hard")
    ortho = reps.preset_spec("orthogonal-96")
    out = {"gta": 0.0, "gta_euclid": 0.0, "gta_euclid (cam blocks, h without translation)": 0.0,
           "gta_kron": 0.0, "ape (min change)": math.inf}
    kspec = reps.kronecker_spec(6)
    for _ in range(n_inst):
        n = int(rng.integers(2, 9))
        d = msn.total_dim
        Q, K, V = _random_tokens(rng, n, d)
        g = [groups.sample_product(rng) for _ in range(n)]
        h = groups.sample_product(rng)
        gh = [groups.compose(x, h) for x in g]
        hr = translation_free(h)
        ghr = [groups.compose(x, hr) for x in g]
        T = (Tensor(Q), Tensor(K), Tensor(V))

        def gta(gs, spec=msn):
            return attn.gta_attention(*T, reps.build_rep(spec, gs)).data

        def euclid(gs, spec=msn):
            return attn.gta_euclid_attention(*T, reps.build_rep(spec, gs)).data

        def kron(gs):
            return attn.gta_kronecker_attention(*T, reps.build_rep_kronecker(kspec, gs)).data

        out["gta"] = max(out["gta"], float(np.abs(gta(g) - gta(gh)).max()))
        out["gta_euclid"] = max(out["gta_euclid"],
                                float(np.abs(euclid(g, ortho) - euclid(gh, ortho)).max()))
        key = "gta_euclid (cam blocks, h without translation)"
        out[key] = max(out[key], float(np.abs(euclid(g) - euclid(ghr)).max()))
        out["gta_kron"] = max(out["gta_kron"], float(np.abs(kron(g) - kron(gh)).max()))
        W = [Tensor(rng.standard_normal((20, d)) / math.sqrt(20)) for _ in range(3)]

        def ape(gs):
            E = Tensor(np.stack([ape_embedding(x) for x in gs]))
            return attn.ape_attention(*T, E, W).data

        out["ape (min change)"] = min(out["ape (min change)"], float(np.abs(ape(g) - ape(gh)).max()))
    return out


def row_sum_error(rng: np.random.Generator, n_inst: int) -> float:
    worst = 0.0
    spec = reps.preset_spec("mixed-24")
    for _ in range(n_inst):
        n = int(rng.integers(2, 9))
        Q, K, V = _random_tokens(rng, n, 24)
        g = [groups.sample_product(rng) for _ in range(n)]
        rec = []
        attn.gta_attention(Tensor(Q), Tensor(K), Tensor(V), reps.build_rep(spec, g), record=rec)
        worst = max(worst, float(np.abs(rec[0].sum(-1) - 1).max()))
    return worst


def suite_attn(rng: np.random.Generator, n_inst: int = 30) -> list[CheckResult]:
    out = []
    t0 = time.perf_counter()
    eq = efficient_vs_definitional(rng, n_inst)
    dt = time.perf_counter() - t0
    out += [CheckResult("attn", f"efficient == definitional {k}", v, 1e-10, "<", dt / 3)
            for k, v in eq.items()]
    t0 = time.perf_counter()
    inv = invariance_errors(rng, n_inst)
    dt = time.perf_counter() - t0
    for k, v in inv.items():
        if k.startswith("ape"):
            out.append(CheckResult("attn", f"frame change moves {k}", v, 1e-3, ">", dt / len(inv)))
        else:
            out.append(CheckResult("attn", f"frame invariance {k}", v, 1e-8, "<", dt / len(inv)))
    out.append(_timed("attn", "attention rows sum to 1", 1e-6, lambda: row_sum_error(rng, n_inst)))
    return out


# ---------------------------------------------------------------- grads

def _param(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _probe_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return dc.sum_all(dc.mul(out, Tensor(weights)))


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (closure, params) for isolated differentiable ops (f64)."""
    cases = {}

    def add_case(name, fn, params):
        out_shape = fn().shape
        w = rng.standard_normal(out_shape)
        cases[name] = (lambda: _probe_loss(fn(), w), params)

    a, b = _param(rng, 2, 3, 4), _param(rng, 4)
    add_case("add (broadcast)", lambda: dc.add(a, b), {"a": a, "b": b})
    c = _param(rng, 2, 3, 4)
    add_case("mul", lambda: dc.mul(a, c), {"a": a, "c": c})
    add_case("sub", lambda: dc.sub(a, c), {"a": a, "c": c})
    w2 = _param(rng, 4, 5)
    add_case("matmul (shared weight)", lambda: dc.matmul(a, w2), {"a": a, "w": w2})
    bm = _param(rng, 2, 4, 3)
    add_case("matmul (batched)", lambda: dc.matmul(a, bm), {"a": a, "b": bm})
    bias = _param(rng, 5)
    add_case("linear", lambda: dc.linear(a, w2, bias), {"a": a, "w": w2, "b": bias})
    add_case("gelu", lambda: dc.gelu(a), {"a": a})
    add_case("exp", lambda: dc.exp(a), {"a": a})
    add_case("softmax", lambda: dc.softmax_lastdim(a), {"a": a})
    g, bb = _param(rng, 4), _param(rng, 4)
    add_case("layer_norm", lambda: dc.layer_norm(a, g, bb), {"a": a, "g": g, "b": bb})
    q, k = _param(rng, 2, 3, 4), _param(rng, 2, 5, 4)
    add_case("neg_sq_dist", lambda: dc.neg_sq_dist(q, k), {"q": q, "k": k})
    add_case("concat", lambda: dc.concat([a, c]), {"a": a, "c": c})
    add_case("getitem", lambda: a[..., 1:3], {"a": a})
    add_case("reshape + swapaxes", lambda: dc.swapaxes(dc.reshape(a, (2, 12)), 0, 1), {"a": a})
    r = _param(rng, 1, 4)
    add_case("broadcast_rows", lambda: dc.broadcast_rows(r, (2, 3, 4)), {"r": r})
    tgt = rng.standard_normal((2, 3, 4))
    cases["mse_loss"] = (lambda: dc.mse_loss(a, tgt), {"a": a})
    spec = reps.preset_spec("mixed-24")
    P = reps.build_rep(spec, [groups.sample_product(rng) for _ in range(3)])
    x = _param(rng, 3, 24)
    for mode in reps.MODES:
        add_case(f"rep_apply ({mode})", lambda mode=mode: dc.rep_apply_node(P, x, mode), {"x": x})
    return cases


def gta_block_case(rng: np.random.Generator, d: int = 24, n: int = 5):
    """One pre-LN block: GTA self-attention and a GELU feedforward, both residual."""
    spec = reps.preset_spec("mixed-24")
    cfg = attn.AttnConfig(1, d, "gta", spec)
    mha = attn.MultiHeadAttention(d, cfg, rng, np.float64)
    params = dict(mha.params)
    params.update({"ln1.g": Tensor(1 + 0.1 * rng.standard_normal(d), requires_grad=True),
                   "ln1.b": _param(rng, d), "ln2.g": Tensor(np.ones(d), requires_grad=True),
                   "ln2.b": _param(rng, d), "f0.w": _param(rng, d, 2 * d), "f0.b": _param(rng, 2 * d),
                   "f1.w": _param(rng, 2 * d, d), "f1.b": _param(rng, d)})
    x = _param(rng, n, d)
    params["x"] = x
    P = reps.build_rep(spec, [groups.sample_product(rng) for _ in range(n)])
    w = rng.standard_normal((n, d))

    def closure():
        h = dc.layer_norm(x, params["ln1.g"], params["ln1.b"])
        y = x + mha(h, P)
        f = dc.linear(dc.gelu(dc.linear(dc.layer_norm(y, params["ln2.g"], params["ln2.b"]),
                                        params["f0.w"], params["f0.b"])), params["f1.w"], params["f1.b"])
        return _probe_loss(y + f, w)

    return closure, params


def tiny_model_case(rng: np.random.Generator, variant: str = "gta", d: int = 24):
    from .model import ModelConfig, NvsModel

    cfg = ModelConfig(token_dim=d, mlp_hidden=16, variant=variant, image_size=4,
                      dtype="float64", seed=int(rng.integers(1 << 31)))
    model = NvsModel(cfg)
    for p in model.params.values():
        # move biases and gains off their init so every path carries gradient
        p.data += 0.05 * rng.standard_normal(p.shape)
    B = 2
    imgs = rng.uniform(size=(B, 8, 4, 4, 3))
    R = groups.sample_rotations(rng, B * 9).reshape(B, 9, 3, 3)
    target = rng.uniform(size=(B, 4, 4, 3))

    def closure():
        return model.loss(imgs, R[:, :8], R[:, 8], target)

    return closure, model.params


def suite_grads(rng: np.random.Generator, max_entries: Optional[int] = 12,
                variants=("gta",)) -> list[CheckResult]:
    out = []
    t0 = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, (closure, params) in op_cases(rng).items():
        rep = dc.gradient_check(closure, params, tol=1e-6)
        if rep.max_rel_error >= worst_op:
            worst_op, worst_name = rep.max_rel_error, name
    out.append(CheckResult("grads", f"isolated ops (worst: {worst_name})", worst_op, 1e-6, "<",
                           time.perf_counter() - t0))
    closure, params = gta_block_case(rng)
    out.append(_timed("grads", "one GTA block", 1e-5,
                      lambda: dc.gradient_check(closure, params, tol=1e-5).max_rel_error))
    for v in variants:
        closure, params = tiny_model_case(rng, v)
        out.append(_timed("grads", f"tiny model d=24 ({v})", 1e-4,
                          lambda: dc.gradient_check(closure, params, tol=1e-4,
                                                    max_entries=max_entries).max_rel_error))
    return out


def run_suites(names, seed: int = 0) -> list[CheckResult]:
    fns = {"groups": suite_groups, "reps": suite_reps, "attn": suite_attn, "grads": suite_grads}
    results = []
    for k, name in enumerate(names):
        if name not in fns:
            raise KeyError(f"unknown suite {name!r}")
        results += fns[name](np.random.default_rng([seed, k]))
    return results
