"""Anomaly scoring from precomputed vision/text embeddings, plus pixel-
and component-level benchmark evaluation."""

from .errors import (
    FormatError,
    GenerationError,
    UndefinedMetricError,
    ValidationError,
    VlscoreError,
)
from .metrics import (
    CurvePoint,
    MetricsReport,
    ScoredPixels,
    component_metrics,
    evaluate,
    fpr_at_tpr,
    pixel_ap,
    retention_curve,
    scored_pixels,
)
from .scoring import (
    MaskClassification,
    UncertaintyMap,
    classification_mode,
    classify_masks,
    cosine_matrix,
    geometric_ensemble,
    maxlogit_reduce,
    score_bundle,
    uncertainty_map,
)
from .synth import Blob, FixtureSpec, build_fixture, gen_fixture
from .tensor_io import (
    ConceptEntry,
    InferenceBundle,
    load_bundle,
    read_tensor,
    write_bundle,
    write_tensor,
)
from .vocab import (
    ClassIndex,
    VocabConfig,
    aggregate_template_embeddings,
    build_class_index,
    default_vocab_config,
    extend_with_ood,
    parse_vocab_config,
)

__version__ = "0.1.0"

__all__ = [
    "Blob",
    "ClassIndex",
    "ConceptEntry",
    "CurvePoint",
    "FixtureSpec",
    "FormatError",
    "GenerationError",
    "InferenceBundle",
    "MaskClassification",
    "MetricsReport",
    "ScoredPixels",
    "UncertaintyMap",
    "UndefinedMetricError",
    "ValidationError",
    "VlscoreError",
    "VocabConfig",
    "aggregate_template_embeddings",
    "build_class_index",
    "build_fixture",
    "classification_mode",
    "classify_masks",
    "component_metrics",
    "cosine_matrix",
    "default_vocab_config",
    "evaluate",
    "extend_with_ood",
    "fpr_at_tpr",
    "gen_fixture",
    "geometric_ensemble",
    "load_bundle",
    "maxlogit_reduce",
    "parse_vocab_config",
    "pixel_ap",
    "read_tensor",
    "retention_curve",
    "score_bundle",
    "scored_pixels",
    "uncertainty_map",
    "write_bundle",
    "write_tensor",
]
