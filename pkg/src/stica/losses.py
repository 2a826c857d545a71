"""The noise-contrastive objective and its combinations.

All losses operate on embedding batches, (N, d) tensors holding one row
per instance from a single transformation set. Similarities are cosine,
so per-instance rescaling of embeddings never changes any loss value.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, logsumexp, matmul

__all__ = [
    "LossWeights",
    "cosine_sim",
    "similarity_matrix",
    "nce_loss",
    "enumerate_crop_pairs",
    "within_modal_terms",
    "within_modal_loss",
    "cross_modal_loss",
    "total_loss",
    "multicrop_baseline_loss",
]


@dataclass
class LossWeights:
    """Mixing coefficients and temperatures of the combined objective."""

    lambda_vv: float = 1.0
    lambda_va: float = 1.0
    lambda_av: float = 0.0
    lambda_aa: float = 0.0
    tau_cross: float = 0.1
    tau_within: float = 0.5

    def __post_init__(self):
        for name in ("lambda_vv", "lambda_va", "lambda_av", "lambda_aa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau_cross <= 0 or self.tau_within <= 0:
            raise ValueError("temperatures must be positive")


def _normalize_rows(z):
    sq = (z * z).sum(axis=-1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise NumericError("embedding batch contains a zero row")
    return z / (sq ** 0.5)


def cosine_sim(z1, z2):
    """Cosine of the angle between two vectors, clamped into [-1, 1]."""
    z1 = np.asarray(z1.data if isinstance(z1, Tensor) else z1, dtype=np.float64)
    z2 = np.asarray(z2.data if isinstance(z2, Tensor) else z2, dtype=np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        raise NumericError("cosine_sim: zero vector")
    return float(np.clip(np.dot(z1, z2) / (n1 * n2), -1.0, 1.0))


def similarity_matrix(za, zb):
    """All-pairs cosine similarities of two (N, d) batches, on the tape."""
    return matmul(_normalize_rows(za), _normalize_rows(zb).transpose())


def nce_loss(za, zb, tau):
    """Contrast each row of `za` against its index-matched row of `zb`,
    with the rest of `zb` as negatives; asymmetric in its arguments."""
    if tau <= 0:
        raise ValueError(f"temperature {tau} must be positive")
    if not isinstance(za, Tensor):
        za = Tensor(za)
    if not isinstance(zb, Tensor):
        zb = Tensor(zb)
    if za.ndim != 2 or zb.ndim != 2 or za.shape != zb.shape:
        raise ShapeError(f"nce_loss: batches {za.shape} vs {zb.shape} must match")
    n = za.shape[0]
    logits = similarity_matrix(za, zb) * (1.0 / tau)
    lse = logsumexp(logits, axis=1)
    pos = (logits * Tensor(np.eye(n))).sum(axis=1)
    return (lse - pos).mean()


def enumerate_crop_pairs(m, n):
    """Cross-set view index pairs, excluding small-with-small.

    Views 0..m-1 are medium, m..m+n-1 are small; each returned (i, j)
    pair stands for both loss directions, so the number of directed
    terms is 2 * len(pairs) = 2 * ((m + n)**2 - n**2).
    """
    if m < 0 or n < 0:
        raise ValueError("counts must be non-negative")
    total = m + n
    return [
        (i, j)
        for i in range(total)
        for j in range(total)
        if not (i >= m and j >= m)
    ]


def within_modal_terms(set1, set2):
    """Directed (za, zb) batch pairs that make up the within-modal loss."""
    crops1 = set1.crop_views()
    crops2 = set2.crop_views()
    if len(crops1) != len(crops2):
        raise ShapeError("view sets hold different crop counts")
    terms = []
    for cls_i, zi in crops1:
        for cls_j, zj in crops2:
            if cls_i == "small" and cls_j == "small":
                continue
            terms.append((zi, zj))
            terms.append((zj, zi))
    return terms


def within_modal_loss(set1, set2, tau, normalize=True):
    """Sum of batched contrastive terms over all admitted crop pairs.

    With `normalize`, the sum is divided by the directed-term count so
    the weight of this loss is comparable across crop plans.
    """
    terms = within_modal_terms(set1, set2)
    if not terms:
        warnings.warn("within-modal loss has no crop pairs; returning 0", RuntimeWarning)
        return Tensor(0.0)
    loss = nce_loss(terms[0][0], terms[0][1], tau)
    for za, zb in terms[1:]:
        loss = loss + nce_loss(za, zb, tau)
    if normalize:
        loss = loss * (1.0 / len(terms))
    return loss


def cross_modal_loss(zl1, zl2, za, tau):
    """Both large visual views against the audio batch, in both directions."""
    return (nce_loss(zl1, za, tau) + nce_loss(zl2, za, tau)
            + nce_loss(za, zl1, tau) + nce_loss(za, zl2, tau))


def total_loss(l_vv, l_va, weights):
    """Weighted combination of the within-modal and cross-modal losses."""
    return l_vv * weights.lambda_vv + l_va * weights.lambda_va


def multicrop_baseline_loss(zl1, zl2, zs, tau):
    """Input-space multi-crop baseline: two large views and one small view
    contrasted through exactly four directed terms."""
    return (nce_loss(zl1, zl2, tau) + nce_loss(zl2, zl1, tau)
            + nce_loss(zl1, zs, tau) + nce_loss(zl2, zs, tau))
