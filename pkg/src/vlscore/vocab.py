"""Concept dictionaries, prompt templates, class merging and OOD prompt
classes.

A vocabulary maps each ID class to one or more alternative concept strings
and optionally groups classes into superclasses for test-time merging.
The shipped default covers the 19 urban-scene classes with their concept
dictionary, 14 prompt templates, 8- and 3-superclass merging presets and
three named OOD prompt sets (``ra19``, ``smiyc``, ``rba``).

The canonical concept-table order is: for each class in declaration order,
its concepts in declaration order; then one row per OOD class.  Channel
indices produced by :func:`build_class_index` refer to this order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .tensor_io import ConceptEntry

DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class VocabConfig:
    """Validated vocabulary: classes, per-class concepts, templates, an
    optional merging map and optional OOD prompt classes."""

    classes: tuple[str, ...]
    concepts: Mapping[str, tuple[str, ...]]
    templates: tuple[str, ...]
    merging: Mapping[str, tuple[str, ...]] | None = None
    ood_classes: tuple[str, ...] = ()
    merging_presets: Mapping[str, Mapping[str, tuple[str, ...]]] = field(default_factory=dict)
    ood_prompt_sets: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class ClassIndex:
    """Resolved output channels: for each channel, the concept-table rows
    whose max cosine forms its logit.  Channels 0..id_channel_count-1 are
    ID; any further channels are OOD prompt classes."""

    groups: tuple[tuple[int, ...], ...]
    id_channel_count: int

    @property
    def k_eff(self) -> int:
        return self.id_channel_count

    @property
    def ood_count(self) -> int:
        return len(self.groups) - self.id_channel_count

    @property
    def channel_count(self) -> int:
        return len(self.groups)


def _validate_merging(name: str, merging: Mapping[str, Sequence[str]], classes: Sequence[str]) -> dict[str, tuple[str, ...]]:
    known = set(classes)
    seen: dict[str, str] = {}
    out: dict[str, tuple[str, ...]] = {}
    for superclass, members in merging.items():
        if not members:
            raise ValidationError(f"{name}: superclass {superclass!r} has no member classes")
        for member in members:
            if member not in known:
                raise ValidationError(
                    f"{name}: superclass {superclass!r} references unknown class {member!r}"
                )
            if member in seen:
                raise ValidationError(
                    f"{name}: class {member!r} listed in both {seen[member]!r} and {superclass!r}"
                )
            seen[member] = superclass
        out[superclass] = tuple(members)
    uncovered = [c for c in classes if c not in seen]
    if uncovered:
        raise ValidationError(f"{name}: classes not assigned to any superclass: {uncovered}")
    return out


def validate_vocab_config(cfg: VocabConfig) -> VocabConfig:
    if not cfg.classes:
        raise ValidationError("vocab: classes list is empty")
    dupes = {c for c in cfg.classes if list(cfg.classes).count(c) > 1}
    if dupes:
        raise ValidationError(f"vocab: duplicate class name {sorted(dupes)[0]!r}")
    for cls in cfg.classes:
        if cls not in cfg.concepts or not cfg.concepts[cls]:
            raise ValidationError(f"vocab: class {cls!r} has an empty concept list")
    unknown = [c for c in cfg.concepts if c not in cfg.classes]
    if unknown:
        raise ValidationError(f"vocab: concepts defined for unknown class {unknown[0]!r}")
    if not cfg.templates:
        raise ValidationError("vocab: templates list is empty")
    if cfg.merging is not None:
        _validate_merging("vocab merging", cfg.merging, cfg.classes)
    for preset, merging in cfg.merging_presets.items():
        _validate_merging(f"vocab merging preset {preset!r}", merging, cfg.classes)
    if len(set(cfg.ood_classes)) != len(cfg.ood_classes):
        raise ValidationError("vocab: duplicate OOD class name")
    clash = set(cfg.ood_classes) & set(cfg.classes)
    if clash:
        raise ValidationError(f"vocab: OOD class {sorted(clash)[0]!r} collides with an ID class")
    return cfg


def parse_vocab_config(text: str) -> VocabConfig:
    """Parse and validate a vocab.json document.

    Schema: ``{classes, concepts, templates, merging?, ood_classes?}`` plus
    the optional ``merging_presets`` and ``ood_prompt_sets`` extensions used
    by the shipped default.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"vocab: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("vocab: top-level document must be a JSON object")
    try:
        cfg = VocabConfig(
            classes=tuple(str(c) for c in doc["classes"]),
            concepts={str(k): tuple(str(c) for c in v) for k, v in doc.get("concepts", {}).items()},
            templates=tuple(str(t) for t in doc.get("templates", [])),
            merging=(
                {str(k): tuple(str(m) for m in v) for k, v in doc["merging"].items()}
                if doc.get("merging")
                else None
            ),
            ood_classes=tuple(str(c) for c in doc.get("ood_classes", [])),
            merging_presets={
                str(p): {str(k): tuple(str(m) for m in v) for k, v in merging.items()}
                for p, merging in doc.get("merging_presets", {}).items()
            },
            ood_prompt_sets={
                str(k): tuple(str(c) for c in v) for k, v in doc.get("ood_prompt_sets", {}).items()
            },
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise ValidationError(f"vocab: malformed document ({exc!r})") from exc
    return validate_vocab_config(cfg)


def load_vocab_config(path: str | Path) -> VocabConfig:
    return parse_vocab_config(Path(path).read_text())


def default_vocab_config() -> VocabConfig:
    """The shipped default vocabulary."""
    text = resources.files("vlscore").joinpath("data/default_vocab.json").read_text()
    return parse_vocab_config(text)


def vocab_to_json(cfg: VocabConfig) -> str:
    """Serialize a config back to the vocab.json schema (deterministic)."""
    doc = {
        "classes": list(cfg.classes),
        "concepts": {c: list(cfg.concepts[c]) for c in cfg.classes},
        "templates": list(cfg.templates),
        "merging": None if cfg.merging is None else {k: list(v) for k, v in cfg.merging.items()},
        "ood_classes": list(cfg.ood_classes),
    }
    if cfg.merging_presets:
        doc["merging_presets"] = {
            p: {k: list(v) for k, v in m.items()} for p, m in cfg.merging_presets.items()
        }
    if cfg.ood_prompt_sets:
        doc["ood_prompt_sets"] = {k: list(v) for k, v in cfg.ood_prompt_sets.items()}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def concept_table_keys(cfg: VocabConfig) -> list[tuple[str, str]]:
    """Canonical (class, concept) pairs: ID concepts first, then one entry
    per OOD class (class and concept both equal to the OOD name)."""
    keys = [(cls, concept) for cls in cfg.classes for concept in cfg.concepts[cls]]
    keys.extend((name, name) for name in cfg.ood_classes)
    return keys


def id_concept_count(cfg: VocabConfig) -> int:
    return sum(len(cfg.concepts[c]) for c in cfg.classes)


def class_concept_rows(cfg: VocabConfig) -> dict[str, tuple[int, ...]]:
    """Canonical concept-table rows owned by each ID class."""
    rows: dict[str, tuple[int, ...]] = {}
    offset = 0
    for cls in cfg.classes:
        n = len(cfg.concepts[cls])
        rows[cls] = tuple(range(offset, offset + n))
        offset += n
    return rows


def aggregate_template_embeddings(raw: np.ndarray, concept_index: Sequence[ConceptEntry]) -> np.ndarray:
    """Collapse per-(concept, template) rows into one unit-norm row per
    concept: the L2-normalized arithmetic mean of that concept's template
    rows.

    Raises :class:`ValidationError` naming the concept when the mean is
    degenerate (L2 norm below 1e-8).
    """
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty((len(concept_index), raw.shape[1]), dtype=np.float64)
    for i, entry in enumerate(concept_index):
        if not entry.template_rows:
            raise ValidationError(f"concept {entry.concept!r} owns no template rows")
        mean = raw[list(entry.template_rows)].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < DEGENERATE_NORM:
            raise ValidationError(
                f"degenerate mean embedding for concept {entry.concept!r} "
                f"of class {entry.class_name!r} (norm {norm:.3e})"
            )
        out[i] = mean / norm
    return out.astype(np.float32)


def build_class_index(cfg: VocabConfig, merge_mode: str = "none") -> ClassIndex:
    """Build the ID output channels over the canonical concept table.

    ``merge_mode`` is ``"none"`` (one channel per class) or ``"merged"``
    (one channel per superclass of ``cfg.merging``, grouping the member
    classes' concept rows).  OOD channels are appended separately via
    :func:`extend_with_ood`.
    """
    if merge_mode not in ("none", "merged"):
        raise ValidationError(f"merge_mode must be 'none' or 'merged', got {merge_mode!r}")
    rows = class_concept_rows(cfg)
    if merge_mode == "none":
        groups = tuple(rows[c] for c in cfg.classes)
    else:
        if cfg.merging is None:
            raise ValidationError("merge_mode 'merged' requires a merging map in the vocab")
        groups = tuple(
            tuple(r for member in members for r in rows[member])
            for members in cfg.merging.values()
        )
    return ClassIndex(groups=groups, id_channel_count=len(groups))


def extend_with_ood(idx: ClassIndex, ood_rows: Sequence[Sequence[int]]) -> ClassIndex:
    """Append one OOD channel per row group; ID channel count is unchanged.

    Row groups must be non-empty and disjoint from every existing group.
    """
    taken: set[int] = {r for g in idx.groups for r in g}
    new_groups = list(idx.groups)
    for i, group in enumerate(ood_rows):
        group = tuple(int(r) for r in group)
        if not group:
            raise ValidationError(f"OOD channel {i} has no concept rows")
        clash = taken & set(group)
        if clash:
            raise ValidationError(
                f"OOD channel {i} reuses concept row {sorted(clash)[0]} already assigned"
            )
        taken.update(group)
        new_groups.append(group)
    return ClassIndex(groups=tuple(new_groups), id_channel_count=idx.id_channel_count)


def resolve_ood_rows(entries: Sequence[ConceptEntry], names: Iterable[str]) -> list[tuple[int, ...]]:
    """Locate each OOD prompt class's concept rows in a bundle's concept
    table (rows are positions in ``entries``)."""
    by_class: dict[str, list[int]] = {}
    for pos, entry in enumerate(entries):
        by_class.setdefault(entry.class_name, []).append(pos)
    rows = []
    for name in names:
        if name not in by_class:
            raise ValidationError(f"bundle has no text embeddings for OOD prompt class {name!r}")
        rows.append(tuple(by_class[name]))
    return rows


def check_bundle_alignment(cfg: VocabConfig, entries: Sequence[ConceptEntry]) -> None:
    """Verify that a bundle's concept table starts with the vocab's
    canonical ID concepts in exactly the canonical order.

    Channel row indices produced by :func:`build_class_index` are positional,
    so a mismatch here would silently score the wrong embeddings.
    """
    wanted = [(cls, concept) for cls in cfg.classes for concept in cfg.concepts[cls]]
    if len(entries) < len(wanted):
        raise ValidationError(
            f"bundle concept table has {len(entries)} entries but the vocab "
            f"defines {len(wanted)} ID concepts"
        )
    for pos, (cls, concept) in enumerate(wanted):
        entry = entries[pos]
        if (entry.class_name, entry.concept) != (cls, concept):
            raise ValidationError(
                f"bundle concept table mismatch at row {pos}: bundle has "
                f"({entry.class_name!r}, {entry.concept!r}), vocab expects ({cls!r}, {concept!r})"
            )


def merging_for_count(cfg: VocabConfig, count: int) -> Mapping[str, tuple[str, ...]] | None:
    """Resolve a requested superclass count to a merging map.

    Returns None for ``count == len(cfg.classes)`` (no merging).  A count
    of 1 synthesizes a single all-classes superclass.  Other counts match
    the vocab's own merging or one of its presets.
    """
    if count == len(cfg.classes):
        return None
    if count == 1:
        return {"entity": tuple(cfg.classes)}
    if str(count) in cfg.merging_presets:
        return cfg.merging_presets[str(count)]
    if cfg.merging is not None and len(cfg.merging) == count:
        return cfg.merging
    raise ValidationError(
        f"no merging with {count} superclasses available for this vocab "
        f"(classes: {len(cfg.classes)}, presets: {sorted(cfg.merging_presets)})"
    )


def class_index_for(cfg: VocabConfig, merge_count: int | None = None) -> ClassIndex:
    """Convenience: build the ID channels for a requested superclass count
    (None means no merging)."""
    if merge_count is None:
        return build_class_index(cfg, "none")
    merging = merging_for_count(cfg, merge_count)
    if merging is None:
        return build_class_index(cfg, "none")
    return build_class_index(replace(cfg, merging=dict(merging)), "merged")
