"""Group representations and their structured, token-wise application.

A :class:`RepSpec` lists the diagonal blocks of a representation; a
:class:`Representation` holds the materialized blocks for one token or for a
whole batch of tokens (blocks carry leading batch dimensions). Application
never builds the dense ``d x d`` matrix.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import groups
from .groups import ProductElement, Se3Pose, So2Angle, So3Rotation

KINDS = ("cam", "rot", "so2_h", "so2_w", "trivial")
MODES = ("plain", "transpose", "inverse")


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class RepBlockSpec:
    kind: str
    param: Optional[float] = None  # degree for rot, frequency for so2, width for trivial

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "rot" and self.param not in (1, 2):
            raise ValueError(f"Wigner-D degree must be 1 or 2, got {self.param}")
        if self.kind in ("so2_h", "so2_w") and not (self.param is not None and self.param > 0):
            raise ValueError(f"so2 frequency must be positive, got {self.param}")
        if self.kind == "trivial" and not (self.param is not None and int(self.param) >= 1):
            raise ValueError("trivial block needs a width >= 1")

    @property
    def block_dim(self) -> int:
        if self.kind == "cam":
            return 4
        if self.kind == "rot":
            return 2 * int(self.param) + 1
        if self.kind == "trivial":
            return int(self.param)
        return 2


@dataclass(frozen=True)
class _Run:
    """Consecutive blocks of one size and one inverse rule."""
    offset: int
    count: int
    size: int
    kind: str                  # "cam", "orth" or "trivial"
    blocks: tuple              # RepBlockSpec per member
    uniform: bool              # every member identical, so one block can broadcast


@dataclass(frozen=True)
class RepSpec:
    blocks: tuple
    runs: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        runs, off, cur = [], 0, []

        def flush():
            if cur:
                size = cur[0].block_dim
                kind = _inverse_class(cur[0].kind)
                start = off - size * len(cur)
                runs.append(_Run(start, len(cur), size, kind, tuple(cur),
                                 all(b == cur[0] for b in cur)))

        for b in blocks:
            if cur and (b.block_dim != cur[0].block_dim
                        or _inverse_class(b.kind) != _inverse_class(cur[0].kind)
                        or b.kind == "trivial"):
                flush()
                cur = []
            cur.append(b)
            off += b.block_dim
        flush()
        object.__setattr__(self, "runs", tuple(runs))

    @functools.cached_property
    def total_dim(self) -> int:
        return sum(b.block_dim for b in self.blocks)

    @functools.cached_property
    def offsets(self) -> list[int]:
        out, off = [], 0
        for b in self.blocks:
            out.append(off)
            off += b.block_dim
        return out

    @property
    def max_block(self) -> int:
        return max(b.block_dim for b in self.blocks)

    def is_orthogonal(self) -> bool:
        return all(b.kind != "cam" for b in self.blocks)

    def check_dim(self, d: int) -> None:
        if self.total_dim != d:
            raise DimensionMismatchError(
                f"representation has dimension {self.total_dim}, expected {d}")


def _inverse_class(kind: str) -> str:
    if kind == "cam":
        return "cam"
    if kind == "trivial":
        return "trivial"
    return "orth"


def octaves(n: int) -> list[float]:
    """Frequencies ``1, 1/2, ..., 1/2^(n-1)``."""
    return [2.0 ** -k for k in range(n)]


def multiplicity_spec(s: int, t: int, u: int, v: int, degrees: Sequence[int] = (1, 2),
                      freqs_h: Sequence[float] = (), freqs_w: Sequence[float] = (),
                      trivial: int = 0, d: Optional[int] = None) -> RepSpec:
    """Block-diagonal spec ``cam^s + rot^t + so2_h^u + so2_w^v (+ identity)``.

    ``t`` repeats the whole degree ladder; ``u``/``v`` repeat the frequency
    ladders. If ``d`` is given the total must match it exactly.
    """
    blocks = [RepBlockSpec("cam")] * s
    for _ in range(t):
        blocks += [RepBlockSpec("rot", l) for l in degrees]
    for _ in range(u):
        blocks += [RepBlockSpec("so2_h", f) for f in freqs_h]
    for _ in range(v):
        blocks += [RepBlockSpec("so2_w", f) for f in freqs_w]
    if trivial:
        blocks.append(RepBlockSpec("trivial", trivial))
    spec = RepSpec(tuple(blocks))
    if d is not None:
        spec.check_dim(d)
    return spec


def strategy_spec(d: int, with_rot: bool = True) -> RepSpec:
    """Split ``d`` 2:1:1 between camera, rotation and image-position blocks.

    Camera blocks get ``d/8`` copies, Wigner degrees {1, 2} get ``d/32``
    copies and each image axis gets ``d/16`` octave frequencies. Without the
    rotation part the image axes absorb its quarter. Leftover dimensions get
    an identity block.
    """
    s = d // 8
    t = d // 32 if with_rot else 0
    n_freq = d // 16 if with_rot else d // 8
    used = 4 * s + 8 * t + 4 * n_freq
    return multiplicity_spec(s, t, 1, 1, (1, 2), octaves(n_freq), octaves(n_freq),
                             trivial=d - used, d=d)


def rotation_stack_spec(d: int) -> RepSpec:
    """``R + R + ... + R`` (``d // 3`` copies), identity on the remainder."""
    blocks = [RepBlockSpec("rot", 1)] * (d // 3)
    if d % 3:
        blocks.append(RepBlockSpec("trivial", d % 3))
    return RepSpec(tuple(blocks))


PRESETS = {
    # small mixed spec used by the property suites
    "mixed-24": lambda: multiplicity_spec(2, 1, 1, 1, (1, 2), octaves(2), octaves(2), d=24),
    "msn-hard": lambda: multiplicity_spec(12, 3, 1, 1, (1, 2), octaves(6), octaves(6), d=96),
    # only orthogonal blocks: distances are preserved by every group element
    "orthogonal-96": lambda: multiplicity_spec(0, 6, 1, 1, (1, 2), octaves(12), octaves(12), d=96),
    "msn-hard-no-so3": lambda: multiplicity_spec(12, 0, 1, 1, (), octaves(12), octaves(12), d=96),
    "clevr-tr-no-so3": lambda: multiplicity_spec(8, 0, 1, 1, (), octaves(8), octaves(8), d=64),
    # the published CLEVR-TR row {8,3,1,1} with 4 frequencies sums to 72, not 64
    "clevr-tr": lambda: multiplicity_spec(8, 3, 1, 1, (1, 2), octaves(4), octaves(4), d=64),
}


def preset_spec(name: str) -> RepSpec:
    if name in PRESETS:
        return PRESETS[name]()
    if name.startswith("strategy-"):
        return strategy_spec(int(name.split("-", 1)[1]))
    if name.startswith("rotstack-"):
        return rotation_stack_spec(int(name.split("-", 1)[1]))
    raise KeyError(f"unknown rep spec {name!r}")


# ---------------------------------------------------------------- blocks

def so2_block(theta, f: float) -> np.ndarray:
    """``[[cos f.theta, -sin f.theta], [sin f.theta, cos f.theta]]``; vectorized over theta."""
    if f <= 0:
        raise ValueError("frequency must be positive")
    if isinstance(theta, So2Angle):
        theta = theta.lift
    a = f * np.asarray(theta, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def cam_block(c) -> np.ndarray:
    if isinstance(c, Se3Pose):
        return c.matrix()
    return _cam_arrays(*c)


def _cam_arrays(R: np.ndarray, T: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    out = np.zeros(R.shape[:-2] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = T
    out[..., 3, 3] = 1.0
    return out


_S2 = 1.0 / math.sqrt(2.0)
_S6 = 1.0 / math.sqrt(6.0)
# Frobenius-orthonormal basis of symmetric traceless 3x3 matrices
# (xy, yz, 2z^2 - x^2 - y^2, xz, x^2 - y^2).
_SYM_TRACELESS = np.array([
    [[0, _S2, 0], [_S2, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 0, _S2], [0, _S2, 0]],
    [[-_S6, 0, 0], [0, -_S6, 0], [0, 0, 2 * _S6]],
    [[0, 0, _S2], [0, 0, 0], [_S2, 0, 0]],
    [[_S2, 0, 0], [0, -_S2, 0], [0, 0, 0]],
])


def wigner_d(r, l: int) -> np.ndarray:
    """Real Wigner-D matrix of degree ``l`` (1 or 2); vectorized over leading dims.

    Degree 1 is the rotation itself. Degree 2 is the action ``M -> R M R^T``
    on symmetric traceless matrices, ``D_kl = <B_k, R B_l R^T>``.
    """
    if isinstance(r, So3Rotation):
        r = r.r
    R = np.asarray(r, dtype=np.float64)
    if l == 1:
        return R.copy()
    if l == 2:
        B = _SYM_TRACELESS
        RB = np.einsum("...ac,lcd->...lad", R, B)
        M = np.einsum("...lad,...bd->...lab", RB, R)
        return np.einsum("kab,...lab->...kl", B, M)
    raise ValueError(f"unsupported Wigner-D degree {l}")


# ---------------------------------------------------------------- representation

class Representation:
    """Materialized block-diagonal representation, possibly batched.

    ``runs[k]`` has shape ``batch + (count_k, b_k, b_k)``, or
    ``batch + (1, b_k, b_k)`` when every member of the run is the same block.
    """

    def __init__(self, spec: RepSpec, runs: list, batch_shape: tuple = ()):
        self.spec = spec
        self.runs = runs
        self.batch_shape = tuple(batch_shape)

    @property
    def dim(self) -> int:
        return self.spec.total_dim

    @property
    def blocks(self) -> list[np.ndarray]:
        out = []
        for run, arr in zip(self.spec.runs, self.runs):
            if run.kind == "trivial":
                out.append(np.broadcast_to(np.eye(run.size), self.batch_shape + (run.size,) * 2))
                continue
            for k in range(run.count):
                out.append(arr[..., min(k, arr.shape[-3] - 1), :, :])
        return out

    @property
    def layout(self) -> list[int]:
        return self.spec.offsets

    def dense(self) -> np.ndarray:
        d = self.dim
        out = np.zeros(self.batch_shape + (d, d))
        for off, blk in zip(self.spec.offsets, self.blocks):
            b = blk.shape[-1]
            out[..., off:off + b, off:off + b] = blk
        return out

    def transpose(self) -> Representation:
        runs = [None if a is None else np.swapaxes(a, -1, -2) for a in self.runs]
        return Representation(self.spec, runs, self.batch_shape)

    def inverse(self) -> Representation:
        runs = []
        for run, a in zip(self.spec.runs, self.runs):
            if a is None:
                runs.append(None)
            elif run.kind == "cam":
                runs.append(_rigid_inverse(a))
            else:
                runs.append(np.swapaxes(a, -1, -2))
        return Representation(self.spec, runs, self.batch_shape)

    def __getitem__(self, idx) -> Representation:
        if not self.batch_shape:
            raise IndexError("unbatched representation")
        runs = [None if a is None else a[idx] for a in self.runs]
        shape = next((a.shape[:-3] for a in runs if a is not None),
                     np.empty(self.batch_shape)[idx].shape)
        return Representation(self.spec, runs, shape)

    def __len__(self) -> int:
        return self.batch_shape[0] if self.batch_shape else 1


def _rigid_inverse(a: np.ndarray) -> np.ndarray:
    R = a[..., :3, :3]
    T = a[..., :3, 3]
    Rt = np.swapaxes(R, -1, -2)
    out = np.zeros_like(a)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T)
    out[..., 3, 3] = 1.0
    return out


def _block_array(blk: RepBlockSpec, R, T, th, tw) -> np.ndarray:
    if blk.kind == "cam":
        if R is None or T is None:
            raise TypeError("camera blocks need a pose")
        return _cam_arrays(R, T)
    if blk.kind == "rot":
        if R is None:
            raise TypeError("rotation blocks need a rotation")
        return wigner_d(R, int(blk.param))
    if blk.kind == "so2_h":
        if th is None:
            raise TypeError("so2_h blocks need a row angle")
        return so2_block(th, blk.param)
    if tw is None:
        raise TypeError("so2_w blocks need a column angle")
    return so2_block(tw, blk.param)


def build_rep_arrays(spec: RepSpec, R=None, T=None, theta_h=None, theta_w=None) -> Representation:
    """Vectorized construction from raw arrays with a common batch shape.

    ``R``: ``batch + (3, 3)``; ``T``: ``batch + (3,)``; angles: ``batch``.
    """
    batch = None
    for a, tail in ((R, 2), (T, 1), (theta_h, 0), (theta_w, 0)):
        if a is not None:
            a = np.asarray(a)
            batch = a.shape[:a.ndim - tail]
            break
    if batch is None:
        batch = ()
    if T is None and R is not None and any(b.kind == "cam" for b in spec.blocks):
        T = np.zeros(np.shape(R)[:-1])
    runs = []
    for run in spec.runs:
        if run.kind == "trivial":
            runs.append(None)
            continue
        if run.uniform:
            blk = _block_array(run.blocks[0], R, T, theta_h, theta_w)
            runs.append(blk[..., None, :, :])
        else:
            runs.append(np.stack([_block_array(b, R, T, theta_h, theta_w)
                                  for b in run.blocks], axis=-3))
    return Representation(spec, runs, batch)


def _components(g):
    if isinstance(g, ProductElement):
        return g.c.rotation.r, g.c.translation, g.theta_h.lift, g.theta_w.lift
    if isinstance(g, Se3Pose):
        return g.rotation.r, g.translation, None, None
    if isinstance(g, So3Rotation):
        return g.r, None, None, None
    if isinstance(g, So2Angle):
        return None, None, g.lift, g.lift
    raise TypeError(f"not a group element: {g!r}")


def build_rep(spec: RepSpec, g, d: Optional[int] = None) -> Representation:
    """Materialize rho_g for one element (or a list of elements, batched).

    Rotation blocks read the rotational part of the camera pose.
    """
    if d is not None:
        spec.check_dim(d)
    if isinstance(g, (list, tuple)):
        return stack_reps([build_rep(spec, x) for x in g])
    R, T, th, tw = _components(g)
    return build_rep_arrays(spec, R, T, th, tw)


def stack_reps(reps: Sequence[Representation]) -> Representation:
    if not reps:
        raise ValueError("empty representation list")
    spec = reps[0].spec
    runs = []
    for k, run in enumerate(spec.runs):
        if run.kind == "trivial":
            runs.append(None)
            continue
        runs.append(np.stack([np.broadcast_to(r.runs[k], r.batch_shape + r.runs[k].shape[-3:])
                              for r in reps]))
    return Representation(spec, runs, (len(reps),) + reps[0].batch_shape)


def rep_transpose(P):
    if isinstance(P, (list, tuple)):
        return [p.transpose() for p in P]
    return P.transpose()


def rep_inverse(P):
    if isinstance(P, (list, tuple)):
        return [p.inverse() for p in P]
    return P.inverse()


class FlopCounter:
    """Multiply-add accumulator handed to :func:`rep_apply` by the caller."""

    def __init__(self):
        self.madds = 0

    def add(self, n: int) -> None:
        self.madds += int(n)


def _as_rep(P):
    if isinstance(P, (list, tuple)):
        return stack_reps(P) if not isinstance(P[0], KroneckerRep) else stack_kron(P)
    return P


def _modeled(P, mode: str):
    if mode == "plain":
        return P
    if mode == "transpose":
        return P.transpose()
    if mode == "inverse":
        return P.inverse()
    raise ValueError(f"unknown mode {mode!r}")


def rep_apply(P, X: np.ndarray, mode: str = "plain",
              counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Token-wise product: row ``i`` of the result is ``rho_i^mode X_i``.

    ``P`` is a batched :class:`Representation` (or :class:`KroneckerRep`)
    whose batch shape broadcasts against ``X.shape[:-1]``, or a list of
    per-token representations. Identity blocks are copied and not counted.
    """
    P = _modeled(_as_rep(P), mode)
    X = np.asarray(X)
    if isinstance(P, KroneckerRep):
        return _kron_apply(P, X, counter)
    P.spec.check_dim(X.shape[-1])
    lead = X.shape[:-1]
    out = np.empty(np.broadcast_shapes(lead, P.batch_shape) + X.shape[-1:],
                   dtype=np.result_type(X, np.float32))
    n_tok = int(np.prod(out.shape[:-1]))
    for run, arr in zip(P.spec.runs, P.runs):
        sl = slice(run.offset, run.offset + run.count * run.size)
        if arr is None:
            out[..., sl] = X[..., sl]
            continue
        if arr.dtype != X.dtype and X.dtype == np.float32:
            arr = arr.astype(np.float32)
        if arr.shape[-3] == 1:
            # one block repeated: a single (count x b) @ (b x b) product per token
            xs = X[..., sl].reshape(lead + (run.count, run.size))
            y = np.matmul(xs, np.swapaxes(arr[..., 0, :, :], -1, -2))
            out[..., sl] = y.reshape(y.shape[:-2] + (run.count * run.size,))
        else:
            xs = X[..., sl].reshape(lead + (run.count, run.size, 1))
            y = np.matmul(arr, xs)
            out[..., sl] = y.reshape(y.shape[:-3] + (run.count * run.size,))
        if counter is not None:
            counter.add(n_tok * run.count * run.size ** 2)
    return out


# ---------------------------------------------------------------- Kronecker form

@dataclass(frozen=True)
class KroneckerSpec:
    left: RepSpec
    right: RepSpec

    def __post_init__(self):
        if [b.kind for b in self.left.blocks] != ["cam"]:
            raise ValueError("Kronecker left factor must be a single camera block")
        if any(b.kind not in ("so2_h", "so2_w") for b in self.right.blocks):
            raise ValueError("Kronecker right factor must contain only so2 blocks")

    @property
    def total_dim(self) -> int:
        return self.left.total_dim * self.right.total_dim

    def check_dim(self, d: int) -> None:
        if self.total_dim != d:
            raise DimensionMismatchError(
                f"representation has dimension {self.total_dim}, expected {d}")


def kronecker_spec(n_freq_h: int, n_freq_w: Optional[int] = None,
                   d: Optional[int] = None) -> KroneckerSpec:
    n_freq_w = n_freq_h if n_freq_w is None else n_freq_w
    right = RepSpec(tuple([RepBlockSpec("so2_h", f) for f in octaves(n_freq_h)]
                          + [RepBlockSpec("so2_w", f) for f in octaves(n_freq_w)]))
    spec = KroneckerSpec(RepSpec((RepBlockSpec("cam"),)), right)
    if d is not None:
        spec.check_dim(d)
    return spec


class KroneckerRep:
    """``left (x) right`` kept factored; ``left`` is 4x4, ``right`` block-diagonal."""

    def __init__(self, spec: KroneckerSpec, left: Representation, right: Representation):
        self.spec = spec
        self.left = left
        self.right = right

    @property
    def total_dim(self) -> int:
        return self.left.dim * self.right.dim

    dim = total_dim

    @property
    def batch_shape(self) -> tuple:
        return self.left.batch_shape

    def transpose(self) -> KroneckerRep:
        return KroneckerRep(self.spec, self.left.transpose(), self.right.transpose())

    def inverse(self) -> KroneckerRep:
        return KroneckerRep(self.spec, self.left.inverse(), self.right.inverse())

    def dense(self) -> np.ndarray:
        A, B = self.left.dense(), self.right.dense()
        m, n = A.shape[-1], B.shape[-1]
        K = np.einsum("...ij,...kl->...ikjl", A, B)
        return K.reshape(K.shape[:-4] + (m * n, m * n))

    def __getitem__(self, idx) -> KroneckerRep:
        return KroneckerRep(self.spec, self.left[idx], self.right[idx])


def build_rep_kronecker(spec: KroneckerSpec, g, d: Optional[int] = None) -> KroneckerRep:
    if d is not None:
        spec.check_dim(d)
    if isinstance(g, (list, tuple)):
        return stack_kron([build_rep_kronecker(spec, x) for x in g])
    R, T, th, tw = _components(g)
    return KroneckerRep(spec, build_rep_arrays(spec.left, R, T),
                        build_rep_arrays(spec.right, theta_h=th, theta_w=tw))


def build_rep_kronecker_arrays(spec: KroneckerSpec, R, T, theta_h, theta_w) -> KroneckerRep:
    return KroneckerRep(spec, build_rep_arrays(spec.left, R, T),
                        build_rep_arrays(spec.right, theta_h=theta_h, theta_w=theta_w))


def stack_kron(reps: Sequence[KroneckerRep]) -> KroneckerRep:
    return KroneckerRep(reps[0].spec, stack_reps([r.left for r in reps]),
                        stack_reps([r.right for r in reps]))


def _kron_apply(P: KroneckerRep, X: np.ndarray, counter) -> np.ndarray:
    P.spec.check_dim(X.shape[-1])
    m, n = P.left.dim, P.right.dim
    Xm = X.reshape(X.shape[:-1] + (m, n))
    # right factor acts on each of the m rows: the rows become extra tokens
    right = P.right
    right_b = Representation(right.spec,
                             [None if a is None else a[..., None, :, :, :] for a in right.runs],
                             right.batch_shape + (1,))
    Y = rep_apply(right_b, Xm, "plain", counter)
    A = P.left.runs[0][..., 0, :, :]
    if X.dtype == np.float32:
        A = A.astype(np.float32)
    Z = np.matmul(A, Y)
    if counter is not None:
        counter.add(int(np.prod(Z.shape[:-2])) * m * m * n)
    return Z.reshape(Z.shape[:-2] + (m * n,))


def rep_dense(P) -> np.ndarray:
    return _as_rep(P).dense()


def homomorphism_error(spec, a, b) -> float:
    """``max |rho(a) rho(b) - rho(ab)|`` for one pair of elements."""
    build = build_rep_kronecker if isinstance(spec, KroneckerSpec) else build_rep
    lhs = build(spec, a).dense() @ build(spec, b).dense()
    rhs = build(spec, groups.compose(a, b)).dense()
    return float(np.abs(lhs - rhs).max())
