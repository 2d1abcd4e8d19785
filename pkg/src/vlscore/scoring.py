"""Per-query mask classification and per-pixel uncertainty scoring.

The pipeline turns one bundle into an uncertainty map:

    text_raw --aggregate--> concept table
    vis_in,  concept table --cosine--> max-logit per channel --softmax/T--> c_in
    vis_out, concept table --cosine--> max-logit per channel --softmax/T--> c_out
    c_in, c_out --geometric ensemble (alpha for ID, beta for OOD channels)--> c
    mask scores s, c --u[h,w] = -max_k sum_i s[i,h,w] * c[i,k] over ID k--> u

Larger u means more anomalous.  OOD prompt channels only participate
through the softmax denominator: they drain probability mass from the ID
channels but are never themselves the channel that the final max ranges
over, so appending them can only raise u.  That monotonicity guarantee
assumes the softmax path; a single merged ID channel without OOD channels
uses the sigmoid fallback instead, and appending channels to it switches
modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor_io import InferenceBundle
from .vocab import ClassIndex, aggregate_template_embeddings

ZERO_NORM = 1e-8

SOFTMAX = "softmax"
SIGMOID = "sigmoid"


@dataclass(frozen=True)
class MaskClassification:
    """Per-query class probabilities, shape (N, channels), values in [0, 1].

    ``mode`` records whether rows came from a temperature softmax or from
    the element-wise sigmoid fallback used for a single merged superclass.
    """

    probs: np.ndarray
    mode: str


@dataclass(frozen=True)
class UncertaintyMap:
    """Per-pixel anomaly score, shape (H, W); larger = more anomalous.

    Values lie in [-N, 0] for N object queries.
    """

    u: np.ndarray


def cosine_matrix(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity, entry (i, j) = cos(v[i], t[j]).

    Rows with L2 norm below 1e-8 are rejected; results are clamped to
    [-1, 1] to absorb rounding.
    """
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[1]:
        raise ValidationError(f"cosine_matrix shapes incompatible: {v.shape} vs {t.shape}")
    for name, mat in (("visual", v), ("text", t)):
        norms = np.linalg.norm(mat, axis=1)
        bad = np.nonzero(norms < ZERO_NORM)[0]
        if bad.size:
            raise ValidationError(f"degenerate {name} embedding at row {int(bad[0])} (near-zero norm)")
    cos = (v / np.linalg.norm(v, axis=1, keepdims=True)) @ (
        t / np.linalg.norm(t, axis=1, keepdims=True)
    ).T
    return np.clip(cos, -1.0, 1.0).astype(np.float32)


def maxlogit_reduce(cos: np.ndarray, idx: ClassIndex) -> np.ndarray:
    """Collapse per-concept cosines to per-channel logits by taking, for
    each channel, the maximum over its concept rows."""
    cos = np.asarray(cos)
    m = cos.shape[1]
    out = np.empty((cos.shape[0], idx.channel_count), dtype=cos.dtype)
    for j, group in enumerate(idx.groups):
        if max(group) >= m:
            raise ValidationError(
                f"channel {j} references concept row {max(group)} outside table of size {m}"
            )
        out[:, j] = cos[:, list(group)].max(axis=1)
    return out


def classification_mode(k_eff: int, ood_count: int) -> str:
    """Sigmoid replaces softmax exactly when there is a single ID channel
    and no OOD channels (a lone softmax term would always output 1)."""
    return SIGMOID if (k_eff == 1 and ood_count == 0) else SOFTMAX


def classify_masks(logits: np.ndarray, temperature: float, mode: str = SOFTMAX) -> MaskClassification:
    """Row-wise softmax of logits/T, or element-wise sigmoid of logits/T.

    Temperature must be positive; the usual value for cosine logits from
    contrastive encoders is around 0.01.
    """
    if temperature <= 0 or not np.isfinite(temperature):
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    if mode not in (SOFTMAX, SIGMOID):
        raise ValidationError(f"unknown classification mode {mode!r}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    if mode == SOFTMAX:
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
    else:
        probs = 1.0 / (1.0 + np.exp(-z))
    return MaskClassification(probs=probs.astype(np.float32), mode=mode)


def geometric_ensemble(
    c_in: np.ndarray,
    c_out: np.ndarray,
    alpha: float,
    beta: float,
    id_count: int,
) -> np.ndarray:
    """Blend in- and out-of-vocabulary classifier probabilities per channel.

    ID channels (index < id_count) get c_in^(1-alpha) * c_out^alpha; the
    remaining OOD channels use beta in place of alpha.  0^0 is 1, exponents
    0 and 1 reproduce the corresponding input exactly, and the output is
    deliberately not renormalized.
    """
    c_in = np.asarray(c_in)
    c_out = np.asarray(c_out)
    if c_in.shape != c_out.shape:
        raise ValidationError(f"ensemble inputs differ in shape: {c_in.shape} vs {c_out.shape}")
    if not 0.0 <= alpha <= 1.0 or not 0.0 <= beta <= 1.0:
        raise ValidationError(f"alpha and beta must lie in [0, 1], got {alpha!r}, {beta!r}")
    if not 0 <= id_count <= c_in.shape[1]:
        raise ValidationError(f"id_count {id_count} outside channel range 0..{c_in.shape[1]}")

    def blend(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
        if w == 0.0:
            return a.copy()
        if w == 1.0:
            return b.copy()
        mixed = np.power(a.astype(np.float64), 1.0 - w) * np.power(b.astype(np.float64), w)
        return mixed.astype(c_in.dtype)

    out = np.empty_like(c_in)
    out[:, :id_count] = blend(c_in[:, :id_count], c_out[:, :id_count], alpha)
    out[:, id_count:] = blend(c_in[:, id_count:], c_out[:, id_count:], beta)
    return out


def uncertainty_map(s: np.ndarray, c: MaskClassification, id_count: int) -> UncertaintyMap:
    """Aggregate mask scores and class probabilities into per-pixel
    uncertainty: u[h,w] = -max over ID channels k of sum_i s[i,h,w]*c[i,k].

    Accumulation runs in float64.  Channels at index >= id_count are
    excluded from the max by construction.
    """
    s = np.asarray(s)
    probs = np.asarray(c.probs)
    if s.ndim != 3:
        raise ValidationError(f"mask scores must be (N, H, W), got shape {s.shape}")
    if probs.ndim != 2 or probs.shape[0] != s.shape[0]:
        raise ValidationError(
            f"classification shape {probs.shape} does not match {s.shape[0]} queries"
        )
    if not 1 <= id_count <= probs.shape[1]:
        raise ValidationError(f"id_count {id_count} outside 1..{probs.shape[1]}")
    s64 = s.astype(np.float64)
    p64 = probs.astype(np.float64)
    best: np.ndarray | None = None
    for k in range(id_count):
        support = np.tensordot(s64, p64[:, k], axes=(0, 0))
        best = support if best is None else np.maximum(best, support)
    return UncertaintyMap(u=(-best).astype(np.float32))


def score_bundle(bundle: InferenceBundle, idx: ClassIndex) -> UncertaintyMap:
    """Run the full scoring pipeline for one bundle against resolved
    channels.

    The sigmoid fallback engages exactly when the index has one ID channel
    and no OOD channels.
    """
    table = aggregate_template_embeddings(bundle.text_raw, bundle.concept_index)
    mode = classification_mode(idx.k_eff, idx.ood_count)
    c_in = classify_masks(maxlogit_reduce(cosine_matrix(bundle.vis_in, table), idx),
                          bundle.temperature, mode)
    c_out = classify_masks(maxlogit_reduce(cosine_matrix(bundle.vis_out, table), idx),
                           bundle.temperature, mode)
    combined = geometric_ensemble(c_in.probs, c_out.probs, bundle.alpha, bundle.beta,
                                  idx.id_channel_count)
    return uncertainty_map(bundle.mask_scores, MaskClassification(combined, mode),
                           idx.id_channel_count)
