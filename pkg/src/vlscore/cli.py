"""Command-line interface: fixture generation, scoring, evaluation and
curve emission.

All outputs are written atomically (temp file + rename) and depend only on
argv and input bytes, so identical invocations produce byte-identical
files.  Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import VlscoreError, ValidationError
from . import metrics as metrics_mod
from .metrics import evaluate, pool_scored_pixels, pr_curve, retention_curve, scored_pixels
from .scoring import classification_mode, score_bundle
from .synth import Blob, FixtureSpec, fixture_spec_from_json, gen_fixture
from .tensor_io import load_bundle, read_tensor, write_tensor
from .vocab import (
    VocabConfig,
    check_bundle_alignment,
    class_index_for,
    default_vocab_config,
    extend_with_ood,
    load_vocab_config,
    resolve_ood_rows,
)

ENV_DEFAULT_VOCAB = "VLSCORE_DEFAULT_VOCAB"

DEFAULT_FIXTURE_BLOBS = (
    Blob(rect=(6, 4, 14, 14), kind="id", index=8),
    Blob(rect=(28, 26, 12, 14), kind="id", index=13),
    Blob(rect=(8, 30, 10, 10), kind="novel", index=0),
)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_tensor(arr: np.ndarray, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_tensor(arr, tmp)
    os.replace(tmp, path)


def _json_dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _resolve_vocab(value: str | None) -> tuple[VocabConfig, str]:
    """Returns (config, provenance label)."""
    if value in (None, "default"):
        env = os.environ.get(ENV_DEFAULT_VOCAB)
        if env:
            return load_vocab_config(env), env
        return default_vocab_config(), "default"
    return load_vocab_config(value), value


def _ood_prompt_names(cfg: VocabConfig, value: str | None) -> tuple[str, ...]:
    if value is None:
        return cfg.ood_classes
    if value == "none":
        return ()
    if value.startswith("file:"):
        doc = json.loads(Path(value[5:]).read_text())
        if not isinstance(doc, list) or not all(isinstance(x, str) for x in doc):
            raise ValidationError(f"{value[5:]}: OOD prompt file must be a JSON list of strings")
        return tuple(doc)
    if value in cfg.ood_prompt_sets:
        return cfg.ood_prompt_sets[value]
    raise ValidationError(
        f"unknown OOD prompt set {value!r}; vocab offers {sorted(cfg.ood_prompt_sets)} "
        f"(or use none / file:PATH)"
    )


def _fixture_ood_pool(cfg: VocabConfig) -> tuple[str, ...]:
    """All OOD classes a fixture should carry text rows for, so any named
    prompt set resolves against it later."""
    pool = list(cfg.ood_classes)
    for name in cfg.ood_prompt_sets:
        for cls in cfg.ood_prompt_sets[name]:
            if cls not in pool:
                pool.append(cls)
    return tuple(pool)


def cmd_gen_fixture(args: argparse.Namespace) -> int:
    if args.spec:
        spec = fixture_spec_from_json(Path(args.spec).read_text())
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    else:
        spec = FixtureSpec(
            seed=args.seed if args.seed is not None else 0,
            n_queries=6,
            dim=64,
            height=48,
            width=48,
            id_class_count=19,
            ood_prompt_count=0,
            blobs=DEFAULT_FIXTURE_BLOBS,
            ignore_border=1,
        )
    if args.vocab == "synthetic":
        cfg = None
    else:
        cfg, _ = _resolve_vocab(args.vocab)
        cfg = replace(cfg, ood_classes=_fixture_ood_pool(cfg))
    gen_fixture(spec, args.out, cfg)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    cfg, vocab_label = _resolve_vocab(args.vocab)
    check_bundle_alignment(cfg, bundle.concept_index)
    bundle = bundle.with_overrides(temperature=args.temp, alpha=args.alpha, beta=args.beta)

    idx = class_index_for(cfg, args.merge)
    names = _ood_prompt_names(cfg, args.ood_prompts)
    if names:
        idx = extend_with_ood(idx, resolve_ood_rows(bundle.concept_index, names))

    result = score_bundle(bundle, idx)
    out = Path(args.out)
    _atomic_write_tensor(result.u, out)

    if args.report:
        report = {
            "bundle": args.bundle,
            "vocab": vocab_label,
            "merge": args.merge if args.merge is not None else len(cfg.classes),
            "id_channels": idx.id_channel_count,
            "ood_channels": idx.ood_count,
            "ood_prompts": list(names),
            "mode": classification_mode(idx.k_eff, idx.ood_count),
            "alpha": bundle.alpha,
            "beta": bundle.beta,
            "temperature": bundle.temperature,
            "scores": str(out),
        }
        _atomic_write_text(Path(args.report), _json_dumps(report))
    return 0


def _load_pairs(score_paths: list[str], label_paths: list[str]) -> list[tuple[np.ndarray, np.ndarray]]:
    if len(score_paths) != len(label_paths):
        raise ValidationError(
            f"got {len(score_paths)} score maps but {len(label_paths)} label maps"
        )
    pairs = []
    for spath, lpath in zip(score_paths, label_paths):
        u = read_tensor(spath)
        gt = read_tensor(lpath)
        if u.ndim != 2 or u.dtype != np.float32:
            raise ValidationError(f"{spath}: expected a float32 H x W score map")
        if gt.ndim != 2 or gt.dtype != np.uint8:
            raise ValidationError(f"{lpath}: expected a uint8 H x W label map")
        pairs.append((u, gt))
    return pairs


def _retention_csv(points) -> str:
    lines = ["threshold,ood_recall,id_retention"]
    lines.extend(f"{p.threshold!r},{p.ood_recall!r},{p.id_retention!r}" for p in points)
    return "\n".join(lines) + "\n"


def cmd_eval(args: argparse.Namespace) -> int:
    pairs = _load_pairs(args.scores, args.labels)
    report = evaluate(pairs, grid_size=args.grid)
    doc = report.to_json_dict()
    doc["config"] = {
        "grid": args.grid,
        "scores": list(args.scores),
        "labels": list(args.labels),
    }
    _atomic_write_text(Path(args.report), _json_dumps(doc))
    if args.curve_out:
        _atomic_write_text(Path(args.curve_out), _retention_csv(report.curve))
    if args.pr_out:
        pooled = pool_scored_pixels([scored_pixels(u, gt) for u, gt in pairs])
        lines = ["recall,precision"]
        lines.extend(f"{r!r},{p!r}" for r, p in pr_curve(pooled))
        _atomic_write_text(Path(args.pr_out), "\n".join(lines) + "\n")
    return 0


def cmd_curve(args: argparse.Namespace) -> int:
    pairs = _load_pairs(args.scores, args.labels)
    pooled = pool_scored_pixels([scored_pixels(u, gt) for u, gt in pairs])
    if args.id_scores:
        id_scores = np.concatenate([read_tensor(p).ravel() for p in args.id_scores])
    else:
        id_scores = pooled.scores[~pooled.is_ood]
    points = retention_curve(pooled, id_scores)
    _atomic_write_text(Path(args.out), _retention_csv(points))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlscore",
        description="Anomaly scoring over precomputed embedding bundles and benchmark evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixture", help="write a deterministic synthetic bundle directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.add_argument("--vocab", default="default",
                   help="'default', 'synthetic' (derive from the spec), or a vocab.json path")
    p.add_argument("--spec", default=None, help="fixture spec JSON (optional)")
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("score", help="score one bundle into an uncertainty map")
    p.add_argument("--bundle", required=True)
    p.add_argument("--vocab", default="default")
    p.add_argument("--merge", type=int, default=None,
                   help="superclass count (default vocab: 19, 8, 3 or 1; default: no merging)")
    p.add_argument("--ood-prompts", default=None,
                   help="none, a named set (ra19, smiyc, rba), or file:PATH "
                        "(default: the vocab's own OOD classes)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--out", required=True, help="output uncertainty tensor (.vlt)")
    p.add_argument("--report", default=None, help="resolved-configuration JSON (optional)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute benchmark metrics over scored maps")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--grid", type=int, default=metrics_mod.DEFAULT_GRID_SIZE)
    p.add_argument("--curve-out", default=None, help="retention curve CSV")
    p.add_argument("--pr-out", default=None, help="precision-recall CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="emit the OOD-recall / ID-retention trade-off CSV")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--id-scores", nargs="*", default=None,
                   help="score maps of an ID-only dataset (default: ID pixels of --scores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except VlscoreError as exc:
        print(f"vlscore: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"vlscore: i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
