"""Attention variants over :mod:`gtakit.diffcore` tensors.

Every function accepts leading batch dimensions: queries are ``(..., n, d)``
and keys/values ``(..., m, d)``. For cross-attention pass separate query and
key/value geometry (``P`` and ``P_kv``); self-attention uses ``P`` for both.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import reps
from .diffcore import Tensor

VARIANTS = ("vanilla", "ape", "rpe_bias", "gta", "gta_euclid", "gta_kron")
GEOMETRY_VARIANTS = ("gta", "gta_euclid", "gta_kron")


@dataclass
class AttnConfig:
    n_heads: int = 1
    head_dim: int = 24
    variant: str = "gta"
    rep_spec: object = None
    transform_values: bool = True
    # RPE-bias: feed the aggregated value-bias channels (mapped back by rho_i)
    # into the output projection instead of discarding them
    rpe_keep_value_bias: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.variant in GEOMETRY_VARIANTS:
            if self.rep_spec is None:
                raise ValueError(f"variant {self.variant} needs a rep_spec")
            self.rep_spec.check_dim(self.head_dim)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class AttnRecord:
    """Attention weights keyed by ``(layer, head)``; arrays are ``(..., n, m)``."""

    maps: dict = field(default_factory=dict)
    token_view: Optional[np.ndarray] = None
    token_patch: Optional[np.ndarray] = None

    def add(self, layer: int, weights: np.ndarray) -> None:
        # weights: (..., heads, n, m)
        for h in range(weights.shape[-3]):
            self.maps[(layer, h)] = np.array(weights[..., h, :, :])

    def layers(self) -> list[int]:
        return sorted({k[0] for k in self.maps})

    def head_average(self, layer: int) -> np.ndarray:
        heads = [v for (l, _), v in sorted(self.maps.items()) if l == layer]
        return np.mean(heads, axis=0)

    def dump_csv(self, out_dir, batch_index: int = 0) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for (layer, head), w in sorted(self.maps.items()):
            if w.ndim > 2:
                w = w.reshape((-1,) + w.shape[-2:])[batch_index]
            path = out_dir / f"attn_layer{layer}_head{head}.csv"
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["row", "col", "weight"])
                for i in range(w.shape[0]):
                    for j in range(w.shape[1]):
                        wr.writerow([i, j, repr(float(w[i, j]))])
            written.append(path)
        return written


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if Q.shape[-1] != K.shape[-1]:
        raise dc.ShapeError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[:-1] != V.shape[:-1]:
        raise dc.ShapeError(f"keys {K.shape} and values {V.shape} disagree")
    if Q.shape[:-2] != K.shape[:-2]:
        raise dc.ShapeError(f"batch shapes differ: {Q.shape} vs {K.shape}")


def _weights(logits: Tensor, record: Optional[list]) -> Tensor:
    A = dc.softmax_lastdim(logits)
    if record is not None:
        record.append(A.data)
    return A


def vanilla_attention(Q: Tensor, K: Tensor, V: Tensor, scale: Optional[float] = None,
                      record: Optional[list] = None) -> Tensor:
    """``softmax(Q K^T * scale) V``; scale defaults to ``1/sqrt(d)``."""
    _check_qkv(Q, K, V)
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[-1])
    logits = dc.scale(dc.matmul(Q, dc.swapaxes(K, -1, -2)), scale)
    return dc.matmul(_weights(logits, record), V)


def euclid_attention(Q: Tensor, K: Tensor, V: Tensor, scale: Optional[float] = None,
                     record: Optional[list] = None) -> Tensor:
    """``softmax(-|Q_i - K_j|^2 * scale) V``."""
    _check_qkv(Q, K, V)
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[-1])
    logits = dc.scale(dc.neg_sq_dist(Q, K), scale)
    return dc.matmul(_weights(logits, record), V)


def gta_attention(Q: Tensor, K: Tensor, V: Tensor, P, P_kv=None, scale: Optional[float] = None,
                  transform_values: bool = True, record: Optional[list] = None,
                  counter=None) -> Tensor:
    """Geometric transform attention in its token-wise form.

    Queries are mapped by ``rho^T``, keys and values by ``rho^-1``, plain
    attention runs in the shared frame and the result is mapped back by
    ``rho`` of each query token. With ``transform_values=False`` only queries
    and keys are transformed.
    """
    P_kv = P if P_kv is None else P_kv
    _check_qkv(Q, K, V)
    q = dc.rep_apply_node(P, Q, "transpose", counter)
    k = dc.rep_apply_node(P_kv, K, "inverse", counter)
    v = dc.rep_apply_node(P_kv, V, "inverse", counter) if transform_values else V
    out = vanilla_attention(q, k, v, scale, record)
    return dc.rep_apply_node(P, out, "plain", counter) if transform_values else out


def gta_euclid_attention(Q: Tensor, K: Tensor, V: Tensor, P, P_kv=None,
                         scale: Optional[float] = None, record: Optional[list] = None,
                         counter=None) -> Tensor:
    P_kv = P if P_kv is None else P_kv
    _check_qkv(Q, K, V)
    q = dc.rep_apply_node(P, Q, "inverse", counter)
    k = dc.rep_apply_node(P_kv, K, "inverse", counter)
    v = dc.rep_apply_node(P_kv, V, "inverse", counter)
    out = euclid_attention(q, k, v, scale, record)
    return dc.rep_apply_node(P, out, "plain", counter)


def gta_kronecker_attention(Q: Tensor, K: Tensor, V: Tensor, KP, KP_kv=None,
                            scale: Optional[float] = None, record: Optional[list] = None,
                            counter=None) -> Tensor:
    """GTA with factored ``rho_cam (x) (rho_h + rho_w)`` representations."""
    for p in (KP, KP_kv):
        if p is not None and not isinstance(reps._as_rep(p), reps.KroneckerRep):
            raise TypeError("gta_kronecker_attention needs KroneckerRep geometry")
    return gta_attention(Q, K, V, KP, KP_kv, scale, True, record, counter)


def ape_attention(Q: Tensor, K: Tensor, V: Tensor, E: Tensor, projections: Sequence[Tensor],
                  E_kv: Optional[Tensor] = None, scale: Optional[float] = None,
                  record: Optional[list] = None) -> Tensor:
    """``softmax((Q + E Wq)(K + E Wk)^T) (V + E Wv)``; ``E`` is ``(..., n, D)``."""
    E_kv = E if E_kv is None else E_kv
    Wq, Wk, Wv = projections
    if E.shape[:-1] != Q.shape[:-1] or E_kv.shape[:-1] != K.shape[:-1]:
        raise dc.ShapeError("embedding shape does not match the tokens")
    return vanilla_attention(Q + dc.matmul(E, Wq), K + dc.matmul(E_kv, Wk),
                             V + dc.matmul(E_kv, Wv), scale, record)


@dataclass
class RpeBias:
    """Learned 9-vectors (three stacked 3-vectors) for one head."""

    b_q: Tensor
    b_k: Tensor
    b_v: Tensor

    def __post_init__(self):
        for b in (self.b_q, self.b_k, self.b_v):
            if b.shape[-1] != 9:
                raise ValueError("RPE bias vectors have length 9")

    @classmethod
    def identity_init(cls, dtype=np.float32) -> RpeBias:
        """Each bias is the flattened 3x3 identity."""
        return cls(*(dc.Tensor(np.eye(3, dtype=dtype).reshape(9), requires_grad=True)
                     for _ in range(3)))


_RPE_SPEC = reps.rotation_stack_spec(9)


def rotation_rep(R: np.ndarray, dtype=np.float64) -> reps.Representation:
    """``R + R + R`` (9x9) for rotations of shape ``batch + (3, 3)``."""
    return _astype(reps.build_rep_arrays(_RPE_SPEC, R=R), dtype)


def _astype(P, dtype):
    if isinstance(P, reps.Representation):
        return reps.Representation(P.spec, [None if a is None else a.astype(dtype) for a in P.runs],
                                   P.batch_shape)
    return P


def rpe_bias_attention(Q: Tensor, K: Tensor, V: Tensor, biases: RpeBias, R_q: np.ndarray,
                       R_kv: Optional[np.ndarray] = None, scale: Optional[float] = None,
                       record: Optional[list] = None, return_bias: bool = False):
    """Attention with rotation-transformed bias channels.

    ``b^Q`` is mapped by ``rho(g_i)^T`` and appended to each query, ``b^K`` and
    ``b^V`` by ``rho(g_j)^-1`` and appended to keys and values, where
    ``rho = R + R + R``. Returns the ``d`` feature channels of the output;
    with ``return_bias`` also the aggregated value-bias channels mapped back
    into each query's frame by ``rho(g_i)``.
    """
    _check_qkv(Q, K, V)
    R_kv = R_q if R_kv is None else R_kv
    d = Q.shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    Pq = rotation_rep(R_q, Q.dtype)
    Pk = rotation_rep(R_kv, Q.dtype)
    bq = dc.rep_apply_node(Pq, dc.broadcast_rows(biases.b_q, Q.shape[:-1] + (9,)), "transpose")
    bk = dc.rep_apply_node(Pk, dc.broadcast_rows(biases.b_k, K.shape[:-1] + (9,)), "inverse")
    bv = dc.rep_apply_node(Pk, dc.broadcast_rows(biases.b_v, V.shape[:-1] + (9,)), "inverse")
    out = vanilla_attention(dc.concat([Q, bq]), dc.concat([K, bk]), dc.concat([V, bv]),
                            scale, record)
    feats = out[..., :d]
    if not return_bias:
        return feats
    return feats, dc.rep_apply_node(Pq, out[..., d:], "plain")


# ---------------------------------------------------------------- multi-head

def _split_heads(x: Tensor, h: int) -> Tensor:
    # (..., n, h*d) -> (..., h, n, d)
    shp = x.shape
    x = dc.reshape(x, shp[:-1] + (h, shp[-1] // h))
    return dc.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = dc.swapaxes(x, -2, -3)
    shp = x.shape
    return dc.reshape(x, shp[:-2] + (shp[-2] * shp[-1],))


def _head_geometry(P):
    """Insert a broadcast head axis in front of the token axis."""
    if P is None:
        return None
    P = reps._as_rep(P)
    if isinstance(P, reps.KroneckerRep):
        return reps.KroneckerRep(P.spec, _head_geometry(P.left), _head_geometry(P.right))
    runs = [None if a is None else np.expand_dims(a, -5) for a in P.runs]
    shape = P.batch_shape[:-1] + (1,) + P.batch_shape[-1:]
    return reps.Representation(P.spec, runs, shape)


class MultiHeadAttention:
    """Projections, per-head attention with shared geometry, output projection.

    Parameters live in ``self.params`` (name -> Tensor).
    """

    def __init__(self, dim: int, config: AttnConfig, rng: np.random.Generator,
                 dtype=np.float32, prefix: str = ""):
        h, d = config.n_heads, config.head_dim
        if h * d != dim:
            raise ValueError(f"feature dim {dim} is not n_heads*head_dim = {h}*{d}")
        self.config = config
        self.dim = dim
        p = {}
        for n in ("wq", "wk", "wv"):
            p[n] = dc.xavier_uniform(rng, dim, dim, dtype)
        keep = config.variant == "rpe_bias" and config.rpe_keep_value_bias
        out_in = dim + (9 * h if keep else 0)
        p["wo"] = dc.xavier_uniform(rng, out_in, dim, dtype)
        p["bo"] = dc.zeros((dim,), dtype)
        if config.variant == "rpe_bias":
            for n in ("b_q", "b_k", "b_v"):
                p[n] = dc.Tensor(np.tile(np.eye(3, dtype=dtype).reshape(9), (h, 1)),
                                 requires_grad=True)
        self.params = {prefix + k: v for k, v in p.items()}
        self._p = p

    def __call__(self, x: Tensor, geom=None, x_kv: Optional[Tensor] = None, geom_kv=None,
                 ape: Optional[tuple] = None, record: Optional[list] = None,
                 counter=None) -> Tensor:
        """Attend from ``x`` to ``x_kv`` (defaults to ``x``).

        ``geom``/``geom_kv`` are representations (GTA variants) or rotation
        arrays ``batch + (n, 3, 3)`` (RPE-bias). ``ape`` is ``(E, E_kv)``.
        """
        cfg, p = self.config, self._p
        h = cfg.n_heads
        x_kv = x if x_kv is None else x_kv
        geom_kv = geom if geom_kv is None else geom_kv
        Q = _split_heads(dc.matmul(x, p["wq"]), h)
        K = _split_heads(dc.matmul(x_kv, p["wk"]), h)
        V = _split_heads(dc.matmul(x_kv, p["wv"]), h)
        v = cfg.variant
        heads_rec = [] if record is not None else None
        extra = None
        if v == "vanilla":
            O = vanilla_attention(Q, K, V, cfg.scale, heads_rec)
        elif v == "ape":
            E, E_kv = ape
            Eh = _split_heads(dc.matmul(E, p["wq"]), h)
            Ekh = _split_heads(dc.matmul(E_kv, p["wk"]), h)
            Evh = _split_heads(dc.matmul(E_kv, p["wv"]), h)
            O = vanilla_attention(Q + Eh, K + Ekh, V + Evh, cfg.scale, heads_rec)
        elif v == "rpe_bias":
            Rq = np.expand_dims(geom, -4)
            Rk = np.expand_dims(geom_kv, -4)
            bias = RpeBias(p["b_q"][:, None, :], p["b_k"][:, None, :], p["b_v"][:, None, :]) \
                if h > 1 else RpeBias(p["b_q"][0], p["b_k"][0], p["b_v"][0])
            if cfg.rpe_keep_value_bias:
                O, extra = rpe_bias_attention(Q, K, V, bias, Rq, Rk, cfg.scale, heads_rec,
                                              return_bias=True)
            else:
                O = rpe_bias_attention(Q, K, V, bias, Rq, Rk, cfg.scale, heads_rec)
        elif v == "gta_euclid":
            O = gta_euclid_attention(Q, K, V, _head_geometry(geom), _head_geometry(geom_kv),
                                     cfg.scale, heads_rec, counter)
        else:
            O = gta_attention(Q, K, V, _head_geometry(geom), _head_geometry(geom_kv),
                              cfg.scale, cfg.transform_values, heads_rec, counter)
        out = _merge_heads(O)
        if extra is not None:
            out = dc.concat([out, _merge_heads(extra)])
        if record is not None:
            record.append(heads_rec[0])
        return dc.add(dc.matmul(out, p["wo"]), p["bo"])


def multi_head(op: str, X: Tensor, P, params: dict, n_heads: int, **kw) -> Tensor:
    """Functional multi-head wrapper for a single-head attention function.

    ``params`` holds ``wq, wk, wv, wo``; each head attends with the same
    per-token geometry ``P``; head outputs are concatenated then projected.
    """
    D = X.shape[-1]
    if D % n_heads:
        raise ValueError(f"feature dim {D} not divisible by {n_heads} heads")
    Q = _split_heads(dc.matmul(X, params["wq"]), n_heads)
    K = _split_heads(dc.matmul(X, params["wk"]), n_heads)
    V = _split_heads(dc.matmul(X, params["wv"]), n_heads)
    fn = {"vanilla": vanilla_attention, "gta": gta_attention,
          "gta_euclid": gta_euclid_attention, "gta_kron": gta_kronecker_attention}[op]
    if op == "vanilla":
        O = fn(Q, K, V, **kw)
    else:
        O = fn(Q, K, V, _head_geometry(P), **kw)
    return dc.matmul(_merge_heads(O), params["wo"])
