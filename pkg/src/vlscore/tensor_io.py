"""VLT tensor files and the on-disk inference-bundle layout.

A ``.vlt`` file is a single dense row-major tensor:

    offset  size        field
    0       4           magic ``VLT1``
    4       1           dtype code (1 = float32, 2 = uint8)
    5       1           ndim (1..4)
    6       2           zero padding
    8       8 * ndim    dimension sizes, little-endian uint64
    ...     payload     raw little-endian row-major values

The header is therefore exactly ``8 + 8 * ndim`` bytes.  float32 payloads
must be finite; NaN/Inf are rejected on both read and write.

A bundle directory holds one image's precomputed model outputs:

    meta.json        n_queries, dim, height, width, n_prompts, temperature,
                     alpha, beta, class_names, concept_index
    mask_scores.vlt  float32 (N, H, W), values in [0, 1]
    vis_in.vlt       float32 (N, D) decoder-processed visual embeddings
    vis_out.vlt      float32 (N, D) mask-pooled encoder visual embeddings
    text_raw.vlt     float32 (P, D), one row per (concept, template) pair
    labels.vlt       optional uint8 (H, W); 0..K-1 = ID class, 254 = OOD,
                     255 = ignore
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"VLT1"
DTYPE_F32 = 1
DTYPE_U8 = 2
MAX_NDIM = 4

OOD_LABEL = 254
IGNORE_LABEL = 255

DEFAULT_ALPHA = 0.4
DEFAULT_BETA = 0.8
DEFAULT_TEMPERATURE = 0.01

_CODE_TO_DTYPE = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return DTYPE_F32
    if arr.dtype == np.uint8:
        return DTYPE_U8
    raise ValidationError(f"unsupported tensor dtype {arr.dtype}; expected float32 or uint8")


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Serialize a float32/uint8 array to a ``.vlt`` file.

    Rejects tensors with unsupported dtype or rank, and float32 tensors
    containing NaN/Inf, before touching the filesystem.
    """
    t = np.asarray(t)
    code = _dtype_code(t)
    if not 1 <= t.ndim <= MAX_NDIM:
        raise ValidationError(f"tensor rank {t.ndim} outside supported range 1..{MAX_NDIM}")
    if any(d < 1 for d in t.shape):
        raise ValidationError(f"tensor shape {t.shape} has a zero-sized dimension")
    if code == DTYPE_F32 and not np.isfinite(t).all():
        raise ValidationError("float32 tensor contains NaN or Inf")
    payload = np.ascontiguousarray(t, dtype=_CODE_TO_DTYPE[code])
    header = struct.pack("<4sBBxx", MAGIC, code, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    Path(path).write_bytes(header + dims + payload.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a ``.vlt`` file back into a read-only numpy array.

    The inverse of :func:`write_tensor`; raises :class:`FormatError` for a
    malformed header or payload length and :class:`ValidationError` for
    non-finite float32 data.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file shorter than the 8-byte fixed header")
    magic, code, ndim = struct.unpack_from("<4sBBxx", raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"{path}: ndim {ndim} outside supported range 1..{MAX_NDIM}")
    header_size = 8 + 8 * ndim
    if len(raw) < header_size:
        raise FormatError(f"{path}: truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: zero-sized dimension in shape {shape}")
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - header_size
    if actual != expected:
        raise FormatError(
            f"{path}: payload length mismatch, declared {expected} bytes for "
            f"shape {shape}, found {actual}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=header_size).reshape(shape)
    if code == DTYPE_F32 and not np.isfinite(arr).all():
        raise ValidationError(f"{path}: float32 payload contains NaN or Inf")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ConceptEntry:
    """One row group of the text-embedding table: a (class, concept) pair
    and the raw template rows that belong to it."""

    class_name: str
    concept: str
    template_rows: tuple[int, ...]


@dataclass(frozen=True)
class InferenceBundle:
    """One image's precomputed model outputs plus scoring hyperparameters.

    All arrays are read-only; bundles are safe to share across workers.
    """

    mask_scores: np.ndarray
    vis_in: np.ndarray
    vis_out: np.ndarray
    text_raw: np.ndarray
    temperature: float
    alpha: float
    beta: float
    class_names: tuple[str, ...]
    concept_index: tuple[ConceptEntry, ...]
    labels: np.ndarray | None = None

    @property
    def n_queries(self) -> int:
        return self.mask_scores.shape[0]

    @property
    def dim(self) -> int:
        return self.vis_in.shape[1]

    @property
    def height(self) -> int:
        return self.mask_scores.shape[1]

    @property
    def width(self) -> int:
        return self.mask_scores.shape[2]

    @property
    def n_prompts(self) -> int:
        return self.text_raw.shape[0]

    def with_overrides(
        self,
        temperature: float | None = None,
        alpha: float | None = None,
        beta: float | None = None,
    ) -> "InferenceBundle":
        out = self
        if temperature is not None:
            _check_scalar("temperature", temperature, positive=True)
            out = replace(out, temperature=float(temperature))
        if alpha is not None:
            _check_scalar("alpha", alpha, unit=True)
            out = replace(out, alpha=float(alpha))
        if beta is not None:
            _check_scalar("beta", beta, unit=True)
            out = replace(out, beta=float(beta))
        return out


def _check_scalar(name: str, value: float, positive: bool = False, unit: bool = False) -> None:
    if not np.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    if positive and value <= 0:
        raise ValidationError(f"{name} must be > 0, got {value!r}")
    if unit and not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.c_contiguous and not arr.flags.writeable:
        return arr
    out = np.array(arr, order="C", copy=True)
    out.flags.writeable = False
    return out


def validate_bundle(bundle: InferenceBundle) -> InferenceBundle:
    """Check every bundle invariant; returns the bundle with arrays frozen."""
    ms, vin, vout, traw = bundle.mask_scores, bundle.vis_in, bundle.vis_out, bundle.text_raw
    if ms.ndim != 3:
        raise ValidationError(f"mask_scores must be (N, H, W), got shape {ms.shape}")
    if vin.ndim != 2 or vout.ndim != 2 or traw.ndim != 2:
        raise ValidationError("vis_in, vis_out and text_raw must be rank-2 tensors")
    n, h, w = ms.shape
    if min(ms.shape) < 1 or min(vin.shape) < 1 or min(vout.shape) < 1 or min(traw.shape) < 1:
        raise ValidationError("bundle tensors must not have zero-sized dimensions")
    if vin.shape[0] != n or vout.shape[0] != n:
        raise ValidationError(
            f"query count mismatch: mask_scores has N={n}, vis_in {vin.shape[0]}, "
            f"vis_out {vout.shape[0]}"
        )
    if vin.shape[1] != vout.shape[1] or vin.shape[1] != traw.shape[1]:
        raise ValidationError(
            f"embedding dim mismatch: vis_in D={vin.shape[1]}, vis_out D={vout.shape[1]}, "
            f"text_raw D={traw.shape[1]}"
        )
    if ms.min() < 0.0 or ms.max() > 1.0:
        raise ValidationError(
            f"mask_scores entries must lie in [0, 1], found range "
            f"[{float(ms.min())}, {float(ms.max())}]"
        )
    _check_scalar("temperature", bundle.temperature, positive=True)
    _check_scalar("alpha", bundle.alpha, unit=True)
    _check_scalar("beta", bundle.beta, unit=True)
    if not bundle.class_names:
        raise ValidationError("class_names must list at least one ID class")
    if not bundle.concept_index:
        raise ValidationError("concept_index must not be empty")

    p = traw.shape[0]
    seen: set[int] = set()
    for entry in bundle.concept_index:
        if not entry.template_rows:
            raise ValidationError(
                f"concept {entry.concept!r} of class {entry.class_name!r} owns no template rows"
            )
        for r in entry.template_rows:
            if not 0 <= r < p:
                raise ValidationError(
                    f"concept {entry.concept!r} references row {r} outside text_raw (P={p})"
                )
            if r in seen:
                raise ValidationError(f"text_raw row {r} assigned to more than one concept")
            seen.add(r)
    if len(seen) != p:
        missing = sorted(set(range(p)) - seen)[:5]
        raise ValidationError(
            f"concept_index covers {len(seen)} of {p} text rows; first unassigned: {missing}"
        )

    if bundle.labels is not None:
        lab = bundle.labels
        if lab.dtype != np.uint8 or lab.shape != (h, w):
            raise ValidationError(
                f"labels must be uint8 of shape ({h}, {w}), got {lab.dtype} {lab.shape}"
            )
        k = len(bundle.class_names)
        bad = lab[(lab >= k) & (lab != OOD_LABEL) & (lab != IGNORE_LABEL)]
        if bad.size:
            raise ValidationError(
                f"labels contain code {int(bad[0])}; valid codes are 0..{k - 1}, "
                f"{OOD_LABEL} (OOD) and {IGNORE_LABEL} (ignore)"
            )

    return replace(
        bundle,
        mask_scores=_freeze(ms),
        vis_in=_freeze(vin),
        vis_out=_freeze(vout),
        text_raw=_freeze(traw),
        labels=None if bundle.labels is None else _freeze(bundle.labels),
    )


_REQUIRED_META = ("n_queries", "dim", "height", "width", "n_prompts", "class_names", "concept_index")


def load_bundle(directory: str | Path) -> InferenceBundle:
    """Load and validate a bundle directory.

    Cross-checks every tensor shape against meta.json; missing alpha, beta
    or temperature fall back to the shipped defaults (0.4, 0.8, 0.01).
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in _REQUIRED_META:
        if key not in meta:
            raise FormatError(f"{meta_path}: missing required field {key!r}")

    entries = []
    for i, item in enumerate(meta["concept_index"]):
        try:
            entries.append(
                ConceptEntry(
                    class_name=str(item["class"]),
                    concept=str(item["concept"]),
                    template_rows=tuple(int(r) for r in item["template_rows"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{meta_path}: concept_index entry {i} malformed ({exc})") from exc

    def _load(name: str) -> np.ndarray:
        path = directory / name
        if not path.is_file():
            raise FormatError(f"{directory}: missing tensor file {name}")
        return read_tensor(path)

    bundle = InferenceBundle(
        mask_scores=_load("mask_scores.vlt"),
        vis_in=_load("vis_in.vlt"),
        vis_out=_load("vis_out.vlt"),
        text_raw=_load("text_raw.vlt"),
        temperature=float(meta.get("temperature", DEFAULT_TEMPERATURE)),
        alpha=float(meta.get("alpha", DEFAULT_ALPHA)),
        beta=float(meta.get("beta", DEFAULT_BETA)),
        class_names=tuple(str(c) for c in meta["class_names"]),
        concept_index=tuple(entries),
        labels=read_tensor(directory / "labels.vlt") if (directory / "labels.vlt").is_file() else None,
    )

    declared = {
        "n_queries": bundle.n_queries,
        "dim": bundle.dim,
        "height": bundle.height,
        "width": bundle.width,
        "n_prompts": bundle.n_prompts,
    }
    for key, actual in declared.items():
        if int(meta[key]) != actual:
            raise ValidationError(
                f"{meta_path}: declares {key}={meta[key]} but tensors have {actual}"
            )
    return validate_bundle(bundle)


def write_bundle(bundle: InferenceBundle, directory: str | Path, extra_meta: dict | None = None) -> None:
    """Write a bundle directory (meta.json plus tensor files).

    meta.json is serialized with sorted keys so identical bundles produce
    byte-identical directories.
    """
    bundle = validate_bundle(bundle)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_queries": bundle.n_queries,
        "dim": bundle.dim,
        "height": bundle.height,
        "width": bundle.width,
        "n_prompts": bundle.n_prompts,
        "temperature": bundle.temperature,
        "alpha": bundle.alpha,
        "beta": bundle.beta,
        "class_names": list(bundle.class_names),
        "concept_index": [
            {"class": e.class_name, "concept": e.concept, "template_rows": list(e.template_rows)}
            for e in bundle.concept_index
        ],
    }
    if extra_meta:
        meta.update(extra_meta)
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    write_tensor(bundle.mask_scores, directory / "mask_scores.vlt")
    write_tensor(bundle.vis_in, directory / "vis_in.vlt")
    write_tensor(bundle.vis_out, directory / "vis_out.vlt")
    write_tensor(bundle.text_raw, directory / "text_raw.vlt")
    if bundle.labels is not None:
        write_tensor(bundle.labels, directory / "labels.vlt")
