"""Slow loop-based reference implementations.

These evaluate attention directly from the per-pair definitions with dense
materialized matrices. They share no code with the token-wise path in
:mod:`gtakit.attn` apart from building single representation matrices, and
exist to check it (tests and ``gtakit check``).
"""
from __future__ import annotations

import math

import numpy as np

from . import groups, reps


def _softmax_row(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def dense_rep(spec, g) -> np.ndarray:
    """Dense ``rho_g``; Kronecker specs are expanded with ``np.kron``."""
    if isinstance(spec, reps.KroneckerSpec):
        kr = reps.build_rep_kronecker(spec, g)
        return np.kron(kr.left.dense(), kr.right.dense())
    return reps.build_rep(spec, g).dense()


def vanilla_loop(Q, K, V, scale=None):
    n, d = Q.shape
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    out = np.zeros((n, V.shape[1]))
    for i in range(n):
        logits = [scale * sum(Q[i, a] * K[j, a] for a in range(d)) for j in range(K.shape[0])]
        w = _softmax_row(logits)
        for j in range(K.shape[0]):
            out[i] += w[j] * V[j]
    return out


def gta_definitional(Q, K, V, spec, g_q, g_kv=None, scale=None):
    """Per-pair form: ``O_i = sum_j softmax_j(Q_i . rho(g_i g_j^-1) K_j) rho(g_i g_j^-1) V_j``."""
    g_kv = g_q if g_kv is None else g_kv
    n, d = Q.shape
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    out = np.zeros((n, d))
    for i in range(n):
        rel = [dense_rep(spec, groups.compose(g_q[i], groups.inverse(g_kv[j])))
               for j in range(len(g_kv))]
        w = _softmax_row([scale * Q[i] @ (rel[j] @ K[j]) for j in range(len(g_kv))])
        for j in range(len(g_kv)):
            out[i] += w[j] * (rel[j] @ V[j])
    return out


def gta_euclid_definitional(Q, K, V, spec, g_q, g_kv=None, scale=None):
    """Per-pair Euclidean form with explicit dense inverses."""
    g_kv = g_q if g_kv is None else g_kv
    n, d = Q.shape
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    inv_q = [np.linalg.inv(dense_rep(spec, g)) for g in g_q]
    inv_k = [np.linalg.inv(dense_rep(spec, g)) for g in g_kv]
    out = np.zeros((n, d))
    for i in range(n):
        qi = inv_q[i] @ Q[i]
        logits = []
        for j in range(len(g_kv)):
            diff = qi - inv_k[j] @ K[j]
            logits.append(-scale * float(diff @ diff))
        w = _softmax_row(logits)
        for j in range(len(g_kv)):
            rel = dense_rep(spec, groups.compose(g_q[i], groups.inverse(g_kv[j])))
            out[i] += w[j] * (rel @ V[j])
    return out


def ape_loop(Q, K, V, E, Wq, Wk, Wv, scale=None):
    return vanilla_loop(Q + E @ Wq, K + E @ Wk, V + E @ Wv, scale)


def rpe_bias_loop(Q, K, V, b_q, b_k, b_v, rotations, scale=None):
    """Per-pair form of the rotation-bias attention (feature channels only)."""
    n, d = Q.shape
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    rho = [np.kron(np.eye(3), R) for R in rotations]
    out = np.zeros((n, d))
    for i in range(n):
        qb = rho[i].T @ b_q
        logits = []
        for j in range(n):
            kb = np.linalg.inv(rho[j]) @ b_k
            logits.append(scale * (Q[i] @ K[j] + qb @ kb))
        w = _softmax_row(logits)
        for j in range(n):
            out[i] += w[j] * V[j]
    return out
