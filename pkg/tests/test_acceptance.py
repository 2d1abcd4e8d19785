"""Acceptance gate: every release-blocking property at its stated
tolerance, one test per criterion.  The terminal summary prints one
pass/fail line per criterion (see conftest.py)."""

import filecmp
import json
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from vlscore.metrics import (
    ScoredPixels,
    component_metrics,
    fpr_at_tpr,
    pixel_ap,
    retention_curve,
    scored_pixels,
)
from vlscore.scoring import (
    classification_mode,
    classify_masks,
    geometric_ensemble,
    maxlogit_reduce,
    score_bundle,
)
from vlscore.synth import (
    build_fixture,
    oracle_ap,
    oracle_component_metrics,
    oracle_fpr_at_tpr,
    oracle_retention,
    oracle_uncertainty,
    random_fixture_spec,
)
from vlscore.tensor_io import (
    ConceptEntry,
    InferenceBundle,
    load_bundle,
    validate_bundle,
)
from vlscore.vocab import (
    ClassIndex,
    VocabConfig,
    build_class_index,
    extend_with_ood,
    id_concept_count,
    validate_vocab_config,
)


def _sweep_fixtures(count=100, min_classes=1, min_ood=0):
    """Deterministic stream of (bundle, flat index, extended index)."""
    for seed in range(count):
        spec = random_fixture_spec(seed, max_queries=8, max_classes=5, max_ood=3,
                                   min_classes=min_classes, min_ood=min_ood, size=16)
        bundle, cfg = build_fixture(spec)
        idx = build_class_index(cfg, "none")
        extended = idx
        if cfg.ood_classes:
            m = id_concept_count(cfg)
            extended = extend_with_ood(idx, [(m + q,) for q in range(len(cfg.ood_classes))])
        yield bundle, idx, extended


def test_criterion_01_uncertainty_oracle_equivalence():
    """Pipeline vs loop oracle within 1e-5 over 100 random fixtures, < 10 s."""
    start = time.monotonic()
    worst = 0.0
    for bundle, _, extended in _sweep_fixtures(100):
        got = score_bundle(bundle, extended).u.astype(np.float64)
        want = oracle_uncertainty(bundle, extended).astype(np.float64)
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.monotonic() - start
    assert worst < 1e-5, f"max abs diff {worst}"
    assert elapsed < 10.0, f"sweep took {elapsed:.1f}s"


def test_criterion_02_maxlogit_bitwise():
    """Channel max equals a naive loop bitwise; singletons are gathers."""
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(2, 16))
        cos = rng.uniform(-1, 1, (n, m)).astype(np.float32)
        rows = rng.permutation(m)
        cuts = sorted(rng.choice(np.arange(1, m), size=min(3, m - 1), replace=False))
        groups = tuple(tuple(int(r) for r in part) for part in np.split(rows, cuts))
        idx = ClassIndex(groups=groups, id_channel_count=len(groups))
        out = maxlogit_reduce(cos, idx)
        for i in range(n):
            for j, group in enumerate(groups):
                best = cos[i, group[0]]
                for r in group[1:]:
                    if cos[i, r] > best:
                        best = cos[i, r]
                assert out[i, j] == best

    cos = rng.uniform(-1, 1, (6, 10)).astype(np.float32)
    singletons = ClassIndex(groups=tuple((j,) for j in range(10)), id_channel_count=10)
    npt.assert_array_equal(maxlogit_reduce(cos, singletons), cos)


def test_criterion_03_softmax_normalization_and_sigmoid_trigger():
    """Softmax rows sum to 1 within 1e-6 on 1e4 rows; sigmoid iff one ID
    channel and no OOD channels."""
    rng = np.random.default_rng(7)
    logits = rng.uniform(-1, 1, (10_000, 9)).astype(np.float32)
    for temp in (0.01, 0.07, 1.0):
        probs = classify_masks(logits, temp).probs
        sums = probs.astype(np.float64).sum(axis=1)
        npt.assert_allclose(sums, 1.0, atol=1e-6)
        assert probs.min() >= 0.0 and probs.max() <= 1.0

    for k_eff in range(1, 6):
        for q in range(0, 4):
            expected = "sigmoid" if (k_eff == 1 and q == 0) else "softmax"
            assert classification_mode(k_eff, q) == expected

    spec = random_fixture_spec(11)
    spec = replace(spec, id_class_count=1, ood_prompt_count=0)
    bundle, cfg = build_fixture(spec)
    flat = build_class_index(cfg, "none")
    u_sigmoid = score_bundle(bundle, flat).u
    npt.assert_array_equal(u_sigmoid, oracle_uncertainty(bundle, flat))
    assert float(np.std(u_sigmoid.astype(np.float64))) > 1e-4


def test_criterion_04_geometric_ensemble_properties(tmp_path):
    """Exponent collapse is bitwise, fixed points hold to 1e-7, and the
    documented alpha/beta defaults load when meta omits them."""
    rng = np.random.default_rng(3)
    c_in = rng.uniform(0, 1, (64, 7)).astype(np.float32)
    c_out = rng.uniform(0, 1, (64, 7)).astype(np.float32)

    collapsed = geometric_ensemble(c_in, c_out, 0.0, 0.0, 7)
    assert collapsed.tobytes() == c_in.tobytes()

    fixed = geometric_ensemble(c_in, c_in, 0.37, 0.91, 4)
    npt.assert_allclose(fixed, c_in, atol=1e-7)

    from vlscore.synth import gen_fixture
    gen_fixture(random_fixture_spec(5), tmp_path / "d")
    meta_path = tmp_path / "d" / "meta.json"
    meta = json.loads(meta_path.read_text())
    del meta["alpha"], meta["beta"]
    meta_path.write_text(json.dumps(meta))
    bundle = load_bundle(tmp_path / "d")
    assert bundle.alpha == 0.4
    assert bundle.beta == 0.8


def test_criterion_05_ood_prompt_monotonicity():
    """Appending OOD prompt channels never lowers any pixel's uncertainty.

    Holds on the softmax path, i.e. with at least two ID channels; a lone
    merged channel takes the sigmoid fallback, where appending channels
    switches classification modes instead of extending a denominator.
    """
    checked = 0
    for bundle, idx, extended in _sweep_fixtures(100, min_classes=2, min_ood=1):
        base = score_bundle(bundle, idx).u.astype(np.float64)
        bumped = score_bundle(bundle, extended).u.astype(np.float64)
        assert float((bumped - base).min()) >= -1e-7
        checked += 1
    assert checked == 100


def _metric_instance(rng):
    n = int(rng.integers(2, 1001))
    if rng.uniform() < 0.5:
        scores = rng.integers(0, 32, n) / 31.0  # tie-heavy lattice
    else:
        scores = rng.uniform(0, 1, n)
    ood = rng.uniform(size=n) < rng.uniform(0.05, 0.95)
    if not ood.any():
        ood[int(rng.integers(0, n))] = True
    if ood.all():
        ood[int(rng.integers(0, n))] = False
    return ScoredPixels(scores=scores.astype(np.float64), is_ood=ood)


def test_criterion_06_pixel_metric_oracle_equivalence():
    """AP and FPR@95TPR match exhaustive-threshold oracles exactly on 1000
    instances; both are invariant under 20 monotone transforms."""
    rng = np.random.default_rng(123)
    for _ in range(1000):
        p = _metric_instance(rng)
        assert pixel_ap(p) == oracle_ap(p)
        assert fpr_at_tpr(p) == oracle_fpr_at_tpr(p)

    lattice = np.arange(64) / 63.0
    scores = lattice[np.random.default_rng(9).integers(0, 64, 400)]
    ood = np.random.default_rng(10).uniform(size=400) < 0.3
    base = ScoredPixels(scores=scores, is_ood=ood)
    base_ap, base_fpr = pixel_ap(base), fpr_at_tpr(base)
    transforms = [
        lambda x: x,
        lambda x: 2.0 * x,
        lambda x: 0.125 * x,
        lambda x: x + 10.0,
        lambda x: 5.0 * x - 3.0,
        np.exp,
        np.expm1,
        np.log1p,
        np.sqrt,
        np.cbrt,
        np.tanh,
        np.arctan,
        np.sinh,
        np.arcsinh,
        lambda x: x ** 2,
        lambda x: x ** 3,
        lambda x: x ** 5,
        lambda x: x / (1.0 + x),
        lambda x: np.power(2.0, x),
        lambda x: x ** 3 + x,
    ]
    assert len(transforms) == 20
    for transform in transforms:
        q = ScoredPixels(scores=np.asarray(transform(scores), dtype=np.float64), is_ood=ood)
        assert pixel_ap(q) == base_ap
        assert fpr_at_tpr(q) == base_fpr


def test_criterion_07_component_metric_hand_cases():
    """Perfect, empty and half-covered 16x16 predictions give exactly
    (1,1,1), (0,0,0) and (0.5, 1.0, 2/3), confirmed by the counting oracle."""
    gt_single = np.zeros((16, 16), dtype=np.uint8)
    gt_single[4:9, 5:11] = 254

    perfect_u = (gt_single == 254).astype(np.float32)
    assert component_metrics(perfect_u, gt_single, [0.5]) == (1.0, 1.0, 1.0)
    assert oracle_component_metrics(perfect_u, gt_single, [0.5]) == (1.0, 1.0, 1.0)

    empty_u = np.zeros((16, 16), dtype=np.float32)
    assert component_metrics(empty_u, gt_single, [0.5]) == (0.0, 0.0, 0.0)
    assert oracle_component_metrics(empty_u, gt_single, [0.5]) == (0.0, 0.0, 0.0)

    gt_two = np.zeros((16, 16), dtype=np.uint8)
    gt_two[2:6, 2:6] = 254
    gt_two[9:13, 9:13] = 254
    half_u = np.zeros((16, 16), dtype=np.float32)
    half_u[2:6, 2:6] = 1.0
    got = component_metrics(half_u, gt_two, [0.5])
    assert got == pytest.approx((0.5, 1.0, 2.0 / 3.0))
    assert got == oracle_component_metrics(half_u, gt_two, [0.5])


def test_criterion_08_retention_curve_endpoints_and_oracle():
    """The sweep pins (0,1) and (1,0) at its ends and matches per-threshold
    counting exactly on random instances."""
    rng = np.random.default_rng(77)
    for _ in range(25):
        n = int(rng.integers(2, 120))
        scores = rng.integers(0, 10, n) / 9.0
        ood = rng.uniform(size=n) < 0.5
        if not ood.any():
            ood[0] = True
        p = ScoredPixels(scores=scores.astype(np.float64), is_ood=ood)
        id_scores = rng.integers(0, 10, int(rng.integers(1, 80))) / 9.0
        points = retention_curve(p, id_scores)
        assert (points[0].ood_recall, points[0].id_retention) == (0.0, 1.0)
        assert (points[-1].ood_recall, points[-1].id_retention) == (1.0, 0.0)
        expected = oracle_retention(p, id_scores)
        assert [(q.threshold, q.ood_recall, q.id_retention) for q in points] == expected


def test_criterion_09_ignore_pixel_inertness():
    """Ten thousand ignore-labeled pixels with adversarial scores change no
    metric by any amount."""
    rng = np.random.default_rng(5)
    gt = np.zeros((20, 20), dtype=np.uint8)
    gt[4:9, 4:9] = 254
    gt[13:17, 12:16] = 254
    u = rng.uniform(-0.9, -0.5, (20, 20)).astype(np.float32)
    u[gt == 254] = rng.uniform(-0.4, -0.1, int((gt == 254).sum())).astype(np.float32)

    base = scored_pixels(u, gt)
    base_ap, base_fpr = pixel_ap(base), fpr_at_tpr(base)
    grid = np.linspace(-0.8, -0.2, 7)
    base_components = component_metrics(u, gt, grid)
    base_curve = retention_curve(base, base.scores[~base.is_ood])

    # pad 25 extra ignore rows (20 x 500 = 10^4 pixels) holding scores at the
    # distribution extremes plus values sitting exactly on grid thresholds
    pad_u = np.empty((25, 400), dtype=np.float32)
    adversarial = np.array(
        [u.max(), u.min(), 99.0, -99.0, *grid], dtype=np.float32
    )
    pad_u.reshape(-1)[:] = np.resize(adversarial, pad_u.size)
    framed_u = np.vstack([u, np.full((5, 20), 0.0, dtype=np.float32)])
    framed_gt = np.vstack([gt, np.full((5, 20), 255, dtype=np.uint8)])
    flat_u = np.concatenate([framed_u.reshape(1, -1), pad_u.reshape(1, -1)], axis=1)[0]
    flat_gt = np.concatenate(
        [framed_gt.reshape(-1), np.full(pad_u.size, 255, dtype=np.uint8)]
    )
    assert int((flat_gt == 255).sum()) >= 10_000

    noisy = ScoredPixels(
        scores=flat_u[flat_gt != 255].astype(np.float64),
        is_ood=(flat_gt[flat_gt != 255] == 254),
    )
    assert pixel_ap(noisy) == base_ap
    assert fpr_at_tpr(noisy) == base_fpr
    noisy_curve = retention_curve(noisy, noisy.scores[~noisy.is_ood])
    assert [(q.ood_recall, q.id_retention) for q in noisy_curve] == [
        (q.ood_recall, q.id_retention) for q in base_curve
    ]

    framed_all_u = np.vstack([u, pad_u[:, :20] * 0 + 99.0])
    framed_all_gt = np.vstack([gt, np.full((25, 20), 255, dtype=np.uint8)])
    assert component_metrics(framed_all_u, framed_all_gt, grid) == base_components


def test_criterion_10_cli_end_to_end_determinism(tmp_path):
    """gen-fixture -> score -> eval twice: byte-identical artifacts, < 30 s."""
    start = time.monotonic()
    runs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        cmds = [
            ["gen-fixture", "--seed", "7", "--out", "bundle"],
            ["score", "--bundle", "bundle", "--vocab", "default", "--merge", "3",
             "--out", "u.vlt", "--report", "score.json"],
            ["eval", "--scores", "u.vlt", "--labels", "bundle/labels.vlt",
             "--report", "report.json", "--curve-out", "curve.csv", "--pr-out", "pr.csv"],
        ]
        for cmd in cmds:
            proc = subprocess.run(
                [sys.executable, "-m", "vlscore.cli", *cmd],
                cwd=root, capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
        runs.append(root)
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"pipeline took {elapsed:.1f}s"

    first, second = runs
    artifacts = ["u.vlt", "score.json", "report.json", "curve.csv", "pr.csv"]
    artifacts += [f"bundle/{p.name}" for p in sorted((first / "bundle").iterdir())]
    match, mismatch, errors = filecmp.cmpfiles(first, second, artifacts, shallow=False)
    assert mismatch == [] and errors == [], (mismatch, errors)
    report = json.loads((first / "report.json").read_text())
    for key in ("ap", "fpr_at_95tpr", "siou_gt", "ppv", "mean_f1", "curve"):
        assert key in report


def _boundary_fixture():
    """Four ID classes, a soft boundary strip between the two sibling
    classes, and an anomalous object next to that boundary whose embedding
    leans toward a third class."""
    dim = 6
    eye = np.eye(dim, dtype=np.float64)
    classes = ("c0", "c1", "c2", "c3")
    cfg = validate_vocab_config(
        VocabConfig(
            classes=classes,
            concepts={c: (c,) for c in classes},
            templates=("{}",),
            merging={"g1": ("c0", "c1"), "g2": ("c2",), "g3": ("c3",)},
        )
    )
    text_raw = eye[:4].astype(np.float32)
    entries = tuple(ConceptEntry(c, c, (i,)) for i, c in enumerate(classes))

    boundary = (eye[0] + eye[1]) / np.sqrt(2.0)
    near_ood = 0.5 * eye[2] + np.sqrt(0.75) * eye[4]
    queries = np.stack([eye[3], eye[0], eye[1], boundary, near_ood]).astype(np.float32)

    h = w = 16
    rect_a = (slice(3, 10), slice(1, 7))      # class c0
    rect_b = (slice(3, 10), slice(9, 15))     # class c1
    strip = (slice(3, 10), slice(7, 9))       # boundary pixels between them
    ood = (slice(11, 15), slice(6, 10))       # anomaly near the boundary

    masks = np.full((5, h, w), 0.02, dtype=np.float32)
    masks[0] = 0.9
    for q, region in ((1, rect_a), (2, rect_b), (3, strip), (4, ood)):
        masks[0][region] = 0.05
        masks[q][region] = 0.9

    labels = np.full((h, w), 3, dtype=np.uint8)
    labels[rect_a] = 0
    labels[rect_b] = 1
    labels[strip] = 0
    labels[ood] = 254

    bundle = validate_bundle(
        InferenceBundle(
            mask_scores=masks,
            vis_in=queries,
            vis_out=queries,
            text_raw=text_raw,
            temperature=0.3,
            alpha=0.4,
            beta=0.8,
            class_names=classes,
            concept_index=entries,
            labels=labels,
        )
    )
    return bundle, cfg


def test_criterion_11_class_merging_lowers_fpr():
    """Merging the sibling classes into one superclass strictly lowers
    FPR@95TPR on the boundary fixture."""
    bundle, cfg = _boundary_fixture()
    flat = build_class_index(cfg, "none")
    merged = build_class_index(cfg, "merged")
    assert flat.k_eff == 4 and merged.k_eff == 3

    u_flat = score_bundle(bundle, flat).u
    u_merged = score_bundle(bundle, merged).u
    fpr_flat = fpr_at_tpr(scored_pixels(u_flat, bundle.labels), 0.95)
    fpr_merged = fpr_at_tpr(scored_pixels(u_merged, bundle.labels), 0.95)
    assert fpr_merged < fpr_flat, (fpr_flat, fpr_merged)
    assert fpr_flat > 0.0
