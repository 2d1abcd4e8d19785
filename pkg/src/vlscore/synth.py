"""Deterministic synthetic fixtures with controlled embedding geometry,
plus brute-force oracles for the scoring and metric formulas.

Fixtures place rectangular blobs on an image, assign each blob an ID
class, an OOD prompt class or a novel (unprompted) concept, and emit a
complete bundle directory: near-orthogonal unit prototypes per concept
group, perturbed text rows per (concept, template) pair, perturbed visual
embeddings per query, soft rectangle indicators as mask scores, and a
label map.  Identical specs produce byte-identical directories.

The oracles re-derive every formula with plain Python loops over 64-bit
floats and share no arithmetic code with the main implementations.  Where
the pipeline's contracts fix float32 tensor boundaries, oracle values are
quantized to float32 at those same boundaries so that comparisons test
the mathematics rather than accumulated rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GenerationError, UndefinedMetricError, ValidationError
from .metrics import ScoredPixels
from .tensor_io import (
    IGNORE_LABEL,
    OOD_LABEL,
    ConceptEntry,
    InferenceBundle,
    validate_bundle,
    write_bundle,
)
from .vocab import ClassIndex, VocabConfig, validate_vocab_config, vocab_to_json

RNG_NAME = "numpy.default_rng/PCG64"

BLOB_ID = "id"
BLOB_OOD = "ood"
BLOB_NOVEL = "novel"

_SYNTH_TEMPLATES = (
    "a photo of a {}.",
    "a photo of a small {}.",
    "there is a {} in the scene.",
)


@dataclass(frozen=True)
class Blob:
    """A rectangle (top, left, height, width) assigned to an ID class, an
    OOD prompt class, or a novel concept slot."""

    rect: tuple[int, int, int, int]
    kind: str
    index: int = 0


@dataclass(frozen=True)
class FixtureSpec:
    seed: int
    n_queries: int
    dim: int
    height: int
    width: int
    id_class_count: int
    ood_prompt_count: int
    blobs: tuple[Blob, ...]
    margin: float = 0.5
    background_class: int = 0
    ignore_border: int = 0
    mask_ramp: int = 2
    noise: float = 0.02
    temperature: float = 0.05
    alpha: float = 0.4
    beta: float = 0.8


def fixture_spec_from_json(text: str) -> FixtureSpec:
    doc = json.loads(text)
    blobs = tuple(
        Blob(rect=tuple(int(x) for x in b["rect"]), kind=str(b["kind"]), index=int(b.get("index", 0)))
        for b in doc.get("blobs", [])
    )
    known = {f.name for f in FixtureSpec.__dataclass_fields__.values()}
    extra = set(doc) - known
    if extra:
        raise ValidationError(f"fixture spec has unknown fields: {sorted(extra)}")
    kwargs = {k: v for k, v in doc.items() if k != "blobs"}
    return FixtureSpec(blobs=blobs, **kwargs)


def _validate_spec(spec: FixtureSpec, n_ood: int) -> int:
    """Returns the number of novel prototype slots the blobs require."""
    if spec.id_class_count < 1 or spec.id_class_count > 253:
        raise ValidationError(f"id_class_count must lie in 1..253, got {spec.id_class_count}")
    if not 0.0 < spec.margin < 2.0:
        raise ValidationError(f"margin must lie in (0, 2), got {spec.margin}")
    if spec.n_queries < 1 + len(spec.blobs):
        raise ValidationError(
            f"n_queries must cover the background plus {len(spec.blobs)} blobs, got {spec.n_queries}"
        )
    if not 0 <= spec.background_class < spec.id_class_count:
        raise ValidationError(f"background_class {spec.background_class} outside class range")
    novel = 0
    for blob in spec.blobs:
        top, left, h, w = blob.rect
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > spec.height or left + w > spec.width:
            raise ValidationError(f"blob rect {blob.rect} outside {spec.height}x{spec.width} image")
        if blob.kind == BLOB_ID:
            if not 0 <= blob.index < spec.id_class_count:
                raise ValidationError(f"blob class index {blob.index} outside 0..{spec.id_class_count - 1}")
        elif blob.kind == BLOB_OOD:
            if not 0 <= blob.index < n_ood:
                raise ValidationError(f"blob OOD prompt index {blob.index} outside 0..{n_ood - 1}")
        elif blob.kind == BLOB_NOVEL:
            if blob.index < 0:
                raise ValidationError(f"novel slot index must be >= 0, got {blob.index}")
            novel = max(novel, blob.index + 1)
        else:
            raise ValidationError(f"unknown blob kind {blob.kind!r}")
    return novel


def _synthetic_vocab(spec: FixtureSpec) -> VocabConfig:
    classes = tuple(f"class{i:02d}" for i in range(spec.id_class_count))
    return validate_vocab_config(
        VocabConfig(
            classes=classes,
            concepts={c: (c, f"{c} variant") for c in classes},
            templates=_SYNTH_TEMPLATES,
            merging=None,
            ood_classes=tuple(f"ood{q:02d}" for q in range(spec.ood_prompt_count)),
        )
    )


def _orthonormal_prototypes(rng: np.random.Generator, count: int, dim: int, margin: float) -> np.ndarray:
    if count > dim:
        raise GenerationError(
            f"cannot place {count} mutually orthogonal prototypes in dimension {dim}"
        )
    if margin >= 1.0:
        raise GenerationError(
            f"margin {margin} unreachable: orthogonal prototypes with perturbed "
            f"members give a cosine gap below 1"
        )
    q, r = np.linalg.qr(rng.standard_normal((dim, count)))
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _ramp(spec: FixtureSpec, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Soft rectangle indicator: 1 inside, linear falloff over mask_ramp
    pixels outside (Chebyshev distance), 0 beyond."""
    top, left, h, w = rect
    ii, jj = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    dy = np.maximum(np.maximum(top - ii, ii - (top + h - 1)), 0)
    dx = np.maximum(np.maximum(left - jj, jj - (left + w - 1)), 0)
    d = np.maximum(dy, dx).astype(np.float64)
    return np.clip(1.0 - d / (spec.mask_ramp + 1.0), 0.0, 1.0)


def build_fixture(spec: FixtureSpec, cfg: VocabConfig | None = None) -> tuple[InferenceBundle, VocabConfig]:
    """Construct a fixture bundle in memory.

    With no vocab, a synthetic one is derived from the spec (two concepts
    per class, three templates, one OOD class per prompt slot).  With an
    explicit vocab, its classes and OOD classes take precedence over the
    spec's counts.
    """
    if cfg is None:
        cfg = _synthetic_vocab(spec)
    else:
        cfg = validate_vocab_config(cfg)
        spec = FixtureSpec(
            **{
                **{f: getattr(spec, f) for f in spec.__dataclass_fields__},
                "id_class_count": len(cfg.classes),
                "ood_prompt_count": len(cfg.ood_classes),
            }
        )
    n_ood = len(cfg.ood_classes)
    n_novel = _validate_spec(spec, n_ood)

    rng = np.random.default_rng(spec.seed)
    k = spec.id_class_count
    protos = _orthonormal_prototypes(rng, k + n_ood + n_novel, spec.dim, spec.margin)
    proto_id = protos[:k]
    proto_ood = protos[k:k + n_ood]
    proto_novel = protos[k + n_ood:]
    eps = min(spec.noise, (1.0 - spec.margin) / 2.0)

    # text rows: canonical order, one block of template rows per concept
    concept_protos: list[tuple[str, str, np.ndarray]] = []
    for ci, cls in enumerate(cfg.classes):
        for concept in cfg.concepts[cls]:
            concept_protos.append((cls, concept, proto_id[ci]))
    for qi, name in enumerate(cfg.ood_classes):
        concept_protos.append((name, name, proto_ood[qi]))

    n_templates = len(cfg.templates)
    text_rows = []
    entries = []
    for pos, (cls, concept, proto) in enumerate(concept_protos):
        start = pos * n_templates
        entries.append(ConceptEntry(cls, concept, tuple(range(start, start + n_templates))))
        for _ in range(n_templates):
            text_rows.append(_unit(proto + (eps / 2.0) * rng.standard_normal(spec.dim)))
    text_raw = np.asarray(text_rows, dtype=np.float32)

    # one query per blob plus a background query; leftovers get random
    # unit embeddings and near-zero masks
    query_protos = [proto_id[spec.background_class]]
    for blob in spec.blobs:
        if blob.kind == BLOB_ID:
            query_protos.append(proto_id[blob.index])
        elif blob.kind == BLOB_OOD:
            query_protos.append(proto_ood[blob.index])
        else:
            query_protos.append(proto_novel[blob.index])
    while len(query_protos) < spec.n_queries:
        query_protos.append(_unit(rng.standard_normal(spec.dim)))

    vis_in = np.asarray(
        [_unit(p + eps * rng.standard_normal(spec.dim)) for p in query_protos], dtype=np.float32
    )
    vis_out = np.asarray(
        [_unit(p + eps * rng.standard_normal(spec.dim)) for p in query_protos], dtype=np.float32
    )

    ramps = [_ramp(spec, blob.rect) for blob in spec.blobs]
    cover = np.zeros((spec.height, spec.width)) if not ramps else np.maximum.reduce(ramps)
    masks = [0.9 * (1.0 - cover) + 0.03]
    masks.extend(0.93 * r + 0.02 for r in ramps)
    while len(masks) < spec.n_queries:
        masks.append(np.full((spec.height, spec.width), 0.02))
    s = np.stack(masks)
    s = s + 0.005 * rng.uniform(-1.0, 1.0, size=s.shape)
    mask_scores = np.clip(s, 0.01, 0.99).astype(np.float32)

    labels = np.full((spec.height, spec.width), spec.background_class, dtype=np.uint8)
    for blob in spec.blobs:
        top, left, h, w = blob.rect
        code = blob.index if blob.kind == BLOB_ID else OOD_LABEL
        labels[top:top + h, left:left + w] = code
    if spec.ignore_border > 0:
        b = spec.ignore_border
        labels[:b, :] = IGNORE_LABEL
        labels[-b:, :] = IGNORE_LABEL
        labels[:, :b] = IGNORE_LABEL
        labels[:, -b:] = IGNORE_LABEL

    bundle = validate_bundle(
        InferenceBundle(
            mask_scores=mask_scores,
            vis_in=vis_in,
            vis_out=vis_out,
            text_raw=text_raw,
            temperature=spec.temperature,
            alpha=spec.alpha,
            beta=spec.beta,
            class_names=cfg.classes,
            concept_index=tuple(entries),
            labels=labels,
        )
    )
    return bundle, cfg


def gen_fixture(spec: FixtureSpec, out: str | Path, cfg: VocabConfig | None = None) -> None:
    """Write a fixture bundle directory plus the vocab that describes it.

    The generator's PRNG and seed are recorded in meta.json so fixtures can
    be reproduced elsewhere.
    """
    bundle, cfg = build_fixture(spec, cfg)
    out = Path(out)
    write_bundle(
        bundle,
        out,
        extra_meta={
            "fixture": {
                "rng": RNG_NAME,
                "seed": spec.seed,
                "margin": spec.margin,
                "noise": spec.noise,
            }
        },
    )
    (out / "vocab.json").write_text(vocab_to_json(cfg))


def random_fixture_spec(
    seed: int,
    max_queries: int = 8,
    max_classes: int = 5,
    max_ood: int = 3,
    min_classes: int = 1,
    min_ood: int = 0,
    size: int = 16,
    dim: int = 24,
) -> FixtureSpec:
    """A small, valid, deterministic random spec for sweep tests."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(min_classes, max_classes + 1))
    q = int(rng.integers(min_ood, max_ood + 1))
    n_blobs = int(rng.integers(1, 4))
    blobs = []
    for _ in range(n_blobs):
        h = int(rng.integers(2, max(3, size // 2)))
        w = int(rng.integers(2, max(3, size // 2)))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        kind = rng.choice(
            [BLOB_ID, BLOB_NOVEL] + ([BLOB_OOD] if q > 0 else [])
        )
        if kind == BLOB_ID:
            index = int(rng.integers(0, k))
        elif kind == BLOB_OOD:
            index = int(rng.integers(0, q))
        else:
            index = 0
        blobs.append(Blob((top, left, h, w), str(kind), index))
    return FixtureSpec(
        seed=seed,
        n_queries=min(max_queries, 1 + n_blobs + int(rng.integers(0, 2))),
        dim=dim,
        height=size,
        width=size,
        id_class_count=k,
        ood_prompt_count=q,
        blobs=tuple(blobs),
        margin=float(rng.uniform(0.3, 0.7)),
        temperature=float(rng.uniform(0.02, 0.5)),
        alpha=float(rng.uniform(0.0, 1.0)),
        beta=float(rng.uniform(0.0, 1.0)),
    )


# ---------------------------------------------------------------------------
# oracles


def _f32(x: float) -> float:
    return float(np.float32(x))


def oracle_uncertainty(bundle: InferenceBundle, idx: ClassIndex) -> np.ndarray:
    """Loop-based re-derivation of the full scoring pipeline.

    Plain Python loops over 64-bit floats; intermediate values are
    quantized to float32 at the documented tensor boundaries.  Intended for
    small sizes (N <= 8, H, W <= 32).
    """
    raw = bundle.text_raw.tolist()
    dim = len(raw[0])

    table = []
    for entry in bundle.concept_index:
        mean = [0.0] * dim
        for r in entry.template_rows:
            for j in range(dim):
                mean[j] += raw[r][j]
        mean = [x / len(entry.template_rows) for x in mean]
        norm = math.sqrt(sum(x * x for x in mean))
        table.append([_f32(x / norm) for x in mean])

    def cosines(rows: list[list[float]]) -> list[list[float]]:
        out = []
        for v in rows:
            nv = math.sqrt(sum(x * x for x in v))
            line = []
            for t in table:
                nt = math.sqrt(sum(x * x for x in t))
                c = sum(a * b for a, b in zip(v, t)) / (nv * nt)
                line.append(_f32(min(1.0, max(-1.0, c))))
            out.append(line)
        return out

    def channel_logits(cos: list[list[float]]) -> list[list[float]]:
        return [[max(row[r] for r in group) for group in idx.groups] for row in cos]

    sigmoid = idx.k_eff == 1 and idx.ood_count == 0

    def classify(logits: list[list[float]]) -> list[list[float]]:
        out = []
        for row in logits:
            z = [x / bundle.temperature for x in row]
            if sigmoid:
                out.append([_f32(1.0 / (1.0 + math.exp(-x))) for x in z])
            else:
                m = max(z)
                exps = [math.exp(x - m) for x in z]
                total = sum(exps)
                out.append([_f32(e / total) for e in exps])
        return out

    c_in = classify(channel_logits(cosines(bundle.vis_in.tolist())))
    c_out = classify(channel_logits(cosines(bundle.vis_out.tolist())))

    combined = []
    for row_in, row_out in zip(c_in, c_out):
        row = []
        for j, (a, b) in enumerate(zip(row_in, row_out)):
            w = bundle.alpha if j < idx.id_channel_count else bundle.beta
            row.append(_f32((a ** (1.0 - w)) * (b ** w)))
        combined.append(row)

    s = bundle.mask_scores.tolist()
    n = len(s)
    u = np.empty((bundle.height, bundle.width), dtype=np.float32)
    for h in range(bundle.height):
        for w_ in range(bundle.width):
            best = None
            for kch in range(idx.id_channel_count):
                total = 0.0
                for i in range(n):
                    total += s[i][h][w_] * combined[i][kch]
                if best is None or total > best:
                    best = total
            u[h, w_] = _f32(-best)
    return u


def _threshold_sweep(scores: np.ndarray) -> list[float]:
    return sorted(set(float(x) for x in scores), reverse=True)


def oracle_ap(p: ScoredPixels) -> float:
    """Average precision by exhaustive threshold enumeration: every
    distinct score becomes a threshold and TP/FP are recounted from scratch
    each time; rectangle areas are summed."""
    npos = int(np.count_nonzero(p.is_ood))
    if npos == 0:
        raise UndefinedMetricError("oracle AP undefined: no positive pixels")
    terms = []
    prev_recall = 0.0
    for tau in _threshold_sweep(p.scores):
        sel = p.scores >= tau
        tp = int(np.count_nonzero(sel & p.is_ood))
        fp = int(np.count_nonzero(sel & ~p.is_ood))
        recall = tp / npos
        terms.append((recall - prev_recall) * (tp / (tp + fp)))
        prev_recall = recall
    return math.fsum(terms)


def oracle_fpr_at_tpr(p: ScoredPixels, target_tpr: float = 0.95) -> float:
    """FPR at the largest threshold reaching the target TPR, by exhaustive
    per-threshold recounting."""
    npos = int(np.count_nonzero(p.is_ood))
    nneg = int(p.is_ood.size - npos)
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("oracle FPR undefined: need both classes")
    for tau in _threshold_sweep(p.scores):
        sel = p.scores >= tau
        tp = int(np.count_nonzero(sel & p.is_ood))
        if tp / npos >= target_tpr:
            fp = int(np.count_nonzero(sel & ~p.is_ood))
            return fp / nneg
    raise AssertionError("sweep always reaches TPR 1.0")


def oracle_retention(ood: ScoredPixels, id_scores: np.ndarray) -> list[tuple[float, float, float]]:
    """Retention curve by direct counting at every distinct threshold plus
    the two sentinel endpoints."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = [float(x) for x, o in zip(ood.scores, ood.is_ood) if o]
    if not ood_scores or id_scores.size == 0:
        raise UndefinedMetricError("oracle retention undefined on empty inputs")
    taus = [math.inf] + _threshold_sweep(ood.scores) + [-math.inf]
    points = []
    for tau in taus:
        recall = sum(1 for x in ood_scores if x >= tau) / len(ood_scores)
        retention = sum(1 for x in id_scores if x < tau) / id_scores.size
        points.append((tau, recall, retention))
    return points


def _flood_components(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or seen[i, j]:
                continue
            stack = [(i, j)]
            seen[i, j] = True
            comp = set()
            while stack:
                y, x = stack.pop()
                comp.add((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            comps.append(comp)
    return comps


def oracle_component_metrics(
    u: np.ndarray, gt: np.ndarray, grid: Sequence[float]
) -> tuple[float, float, float]:
    """Component metrics by breadth-first component search and pixel-set
    counting."""
    u = np.asarray(u)
    gt = np.asarray(gt)
    valid = gt != IGNORE_LABEL
    gt_mask = (gt == OOD_LABEL) & valid
    gt_comps = _flood_components(gt_mask)
    if not gt_comps:
        raise UndefinedMetricError("oracle component metrics undefined: no OOD component")
    gt_all = set().union(*gt_comps)
    siou_acc, ppv_acc, f1_acc = [], [], []
    for tau in grid:
        pred_mask = (u >= tau) & valid
        pred = {(i, j) for i, j in zip(*np.nonzero(pred_mask))}
        sious = []
        for comp in gt_comps:
            others = gt_all - comp
            adjusted = pred - others
            sious.append(len(comp & pred) / len(comp | adjusted))
        pred_comps = _flood_components(pred_mask)
        ppvs = [len(pc & gt_all) / len(pc) for pc in pred_comps]
        tp = sum(1 for x in sious if x > 0.5)
        fn = len(sious) - tp
        fp = sum(1 for x in ppvs if x <= 0.5)
        siou_acc.append(sum(sious) / len(sious))
        ppv_acc.append(sum(ppvs) / len(ppvs) if ppvs else 0.0)
        f1_acc.append(2 * tp / (2 * tp + fn + fp))
    m = len(list(grid))
    return sum(siou_acc) / m, sum(ppv_acc) / m, sum(f1_acc) / m
