"""Attention diagnostics: view-to-view summaries and mask-alignment PR-AUC."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attn import AttnRecord


class MaskError(ValueError):
    pass


# ---------------------------------------------------------------- view-to-view

def token_views(n_views: int, tokens_per_view: int) -> np.ndarray:
    return np.repeat(np.arange(n_views), tokens_per_view)


def view_to_view_matrix(A: np.ndarray, token_view: np.ndarray, n_views: int) -> np.ndarray:
    """Entry ``(i, j)``: mean of ``A[q, k]`` over queries in view i and keys in view j.

    Leading batch dimensions of ``A`` are averaged out.
    """
    A = np.asarray(A, dtype=np.float64)
    token_view = np.asarray(token_view)
    n = A.shape[-1]
    if A.shape[-2] != n or token_view.shape != (n,):
        raise ValueError(f"token map of length {token_view.shape} does not cover {A.shape[-2:]}")
    if token_view.min() < 0 or token_view.max() >= n_views:
        raise ValueError("token map refers to a view outside [0, n_views)")
    A = A.reshape((-1, n, n)).mean(axis=0)
    onehot = (token_view[:, None] == np.arange(n_views)[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    if np.any(counts == 0):
        raise ValueError("every view needs at least one token")
    sums = onehot.T @ A @ onehot
    return sums / np.outer(counts, counts)


def view_to_view(rec: AttnRecord, n_views: int, tokens_per_view: int) -> dict:
    """Per ``(layer, head)`` summaries for views holding contiguous token ranges."""
    tv = token_views(n_views, tokens_per_view)
    return {key: view_to_view_matrix(w, tv, n_views) for key, w in sorted(rec.maps.items())}


# ---------------------------------------------------------------- masks

@dataclass
class MaskSet:
    """Object masks ``(n_views, n_objects, H, W)`` over a grid of square patches.

    Tokens are numbered view-major, then row-major over the patch grid. The
    query region is a ``region x region`` pixel window centred on the query
    token's patch; it defaults to the patch itself.
    """

    masks: np.ndarray
    patch: int
    region: Optional[int] = None

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 4:
            raise MaskError("masks must be (n_views, n_objects, H, W)")
        H, W = self.masks.shape[-2:]
        if self.patch <= 0 or H % self.patch or W % self.patch:
            raise MaskError(f"patch size {self.patch} does not tile {H}x{W}")
        if self.region is None:
            self.region = self.patch
        if self.region <= 0:
            raise MaskError("region must be positive")

    @property
    def n_views(self) -> int:
        return self.masks.shape[0]

    @property
    def n_objects(self) -> int:
        return self.masks.shape[1]

    @property
    def grid(self) -> tuple:
        H, W = self.masks.shape[-2:]
        return H // self.patch, W // self.patch

    @property
    def tokens_per_view(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def token_labels(self) -> np.ndarray:
        """``(n_objects, n_tokens)``: a token belongs to an object if any pixel of its patch does."""
        V, O, H, W = self.masks.shape
        p = self.patch
        gh, gw = self.grid
        m = self.masks.reshape(V, O, gh, p, gw, p).any(axis=(3, 5))
        return m.transpose(1, 0, 2, 3).reshape(O, V * gh * gw)

    def query_weights(self, token: int) -> np.ndarray:
        """Per-object pixel counts inside the query region, normalized to sum 1."""
        gh, gw = self.grid
        T = gh * gw
        if not 0 <= token < self.n_views * T:
            raise IndexError(f"token {token} out of range")
        v, t = divmod(token, T)
        r, c = divmod(t, gw)
        p, s = self.patch, self.region
        H, W = self.masks.shape[-2:]
        cy, cx = r * p + p / 2, c * p + p / 2
        y0, x0 = int(round(cy - s / 2)), int(round(cx - s / 2))
        win = self.masks[v, :, max(0, y0):min(H, y0 + s), max(0, x0):min(W, x0 + s)]
        counts = win.reshape(self.n_objects, -1).sum(axis=1).astype(np.float64)
        total = counts.sum()
        if total == 0:
            raise MaskError(f"no object in the region of query token {token}")
        return counts / total


# ---------------------------------------------------------------- PR curves

@dataclass
class PrCurve:
    thresholds: np.ndarray   # ascending
    precision: np.ndarray
    recall: np.ndarray

    @property
    def auc(self) -> float:
        return trapezoid_auc(self.recall, self.precision)

    def points(self) -> list:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.points():
                wr.writerow([repr(t), repr(p), repr(r)])


def trapezoid_auc(recall, precision) -> float:
    """Area under precision as a function of recall (points sorted by recall)."""
    r = np.asarray(recall, dtype=np.float64)
    p = np.asarray(precision, dtype=np.float64)
    order = np.lexsort((p, r))
    r, p = r[order], p[order]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def thresholds_for(alpha: np.ndarray) -> np.ndarray:
    return np.union1d(np.unique(alpha), [0.0, 1.0])


def object_curve(alpha: np.ndarray, labels: np.ndarray, thresholds: np.ndarray):
    """Precision/recall of ``alpha > t`` against one object's 0/1 token labels.

    An empty prediction has no defined precision; it takes the value from the
    next lower threshold (1.0 if there is none).
    """
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise MaskError("object has an empty mask")
    pred = alpha[None, :] > thresholds[:, None]
    n_pred = pred.sum(axis=1)
    tp = (pred & labels[None, :]).sum(axis=1)
    recall = tp / n_pos
    precision = np.empty(len(thresholds))
    last = 1.0
    for k in range(len(thresholds)):
        if n_pred[k]:
            last = tp[k] / n_pred[k]
        precision[k] = last
    return precision, recall


def pr_auc(alpha: np.ndarray, masks: MaskSet, query: int,
           thresholds: Optional[np.ndarray] = None) -> PrCurve:
    """Weighted PR curve of a head-averaged attention row for one query token."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    labels = masks.token_labels()
    if alpha.shape[0] != labels.shape[1]:
        raise ValueError(f"attention row has {alpha.shape[0]} entries, masks cover {labels.shape[1]}")
    if np.any(alpha < 0):
        raise ValueError("attention weights must be nonnegative")
    if not masks.masks.any():
        raise MaskError("all masks are empty")
    w = masks.query_weights(query)
    ts = thresholds_for(alpha) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    P = np.zeros(len(ts))
    R = np.zeros(len(ts))
    for o in np.flatnonzero(w):
        p, r = object_curve(alpha, labels[o], ts)
        P += w[o] * p
        R += w[o] * r
    return PrCurve(ts, P, R)


def sampled_pr_auc(attn: np.ndarray, masks: Sequence[MaskSet], rng: np.random.Generator,
                   n_samples: int, grid: Optional[np.ndarray] = None):
    """Average PR curve and AUC over randomly sampled scenes and query tokens.

    ``attn`` is ``(n_scenes, n_tokens, n_tokens)`` head-averaged attention; query
    tokens without any object in their region are resampled. Curves are
    averaged on a common threshold grid (log-spaced by default, since
    attention weights are typically small).
    """
    grid = np.concatenate([[0.0], np.geomspace(1e-4, 1.0, 100)]) if grid is None else np.asarray(grid)
    P = np.zeros(len(grid))
    R = np.zeros(len(grid))
    aucs = []
    taken = 0
    tries = 0
    while taken < n_samples:
        tries += 1
        if tries > 100 * n_samples:
            raise MaskError("too few query tokens with objects in their region")
        s = int(rng.integers(len(masks)))
        q = int(rng.integers(attn.shape[-2]))
        try:
            curve = pr_auc(attn[s, q], masks[s], q)
        except MaskError:
            continue
        aucs.append(curve.auc)
        g = pr_auc(attn[s, q], masks[s], q, thresholds=grid)
        P += g.precision
        R += g.recall
        taken += 1
    return PrCurve(grid, P / n_samples, R / n_samples), float(np.mean(aucs))
