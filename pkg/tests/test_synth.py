import filecmp
import json

import numpy as np
import numpy.testing as npt
import pytest
from dataclasses import replace

from vlscore.errors import GenerationError, ValidationError
from vlscore.scoring import score_bundle
from vlscore.synth import (
    Blob,
    FixtureSpec,
    build_fixture,
    fixture_spec_from_json,
    gen_fixture,
    oracle_uncertainty,
    random_fixture_spec,
)
from vlscore.tensor_io import ConceptEntry, InferenceBundle, OOD_LABEL, load_bundle, validate_bundle
from vlscore.vocab import ClassIndex, build_class_index, default_vocab_config


def _spec(**overrides):
    base = dict(
        seed=3,
        n_queries=4,
        dim=16,
        height=12,
        width=12,
        id_class_count=3,
        ood_prompt_count=1,
        blobs=(Blob((2, 2, 4, 4), "id", 1), Blob((7, 7, 4, 4), "novel", 0)),
    )
    base.update(overrides)
    return FixtureSpec(**base)


class TestGeneration:
    def test_same_seed_bitwise_identical(self, tmp_path):
        spec = _spec()
        gen_fixture(spec, tmp_path / "a")
        gen_fixture(spec, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
        assert mismatch == [] and errors == []

    def test_different_seed_differs(self, tmp_path):
        gen_fixture(_spec(), tmp_path / "a")
        gen_fixture(_spec(seed=4), tmp_path / "b")
        a = (tmp_path / "a" / "vis_in.vlt").read_bytes()
        b = (tmp_path / "b" / "vis_in.vlt").read_bytes()
        assert a != b

    def test_output_loads_cleanly(self, tmp_path):
        gen_fixture(_spec(ignore_border=1), tmp_path / "d")
        bundle = load_bundle(tmp_path / "d")
        assert bundle.n_queries == 4
        assert bundle.labels is not None
        assert (bundle.labels == 255).any()

    def test_meta_records_prng(self, tmp_path):
        gen_fixture(_spec(), tmp_path / "d")
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        assert meta["fixture"]["rng"].startswith("numpy")
        assert meta["fixture"]["seed"] == 3

    def test_vocab_written_alongside(self, tmp_path):
        gen_fixture(_spec(), tmp_path / "d")
        doc = json.loads((tmp_path / "d" / "vocab.json").read_text())
        assert len(doc["classes"]) == 3
        assert doc["ood_classes"] == ["ood00"]

    def test_explicit_vocab_overrides_counts(self):
        cfg = default_vocab_config()
        cfg = replace(cfg, ood_classes=("caravan",))
        spec = _spec(dim=32, blobs=(Blob((2, 2, 4, 4), "id", 8),))
        bundle, out_cfg = build_fixture(spec, cfg)
        assert out_cfg.classes == cfg.classes
        assert bundle.n_prompts == (67 + 1) * 14
        assert len(bundle.class_names) == 19

    def test_labels_follow_blob_kinds(self):
        bundle, _ = build_fixture(_spec())
        assert (bundle.labels == 1).any()
        assert (bundle.labels == OOD_LABEL).any()

    def test_novel_blob_separates(self):
        bundle, cfg = build_fixture(_spec(height=20, width=20,
                                          blobs=(Blob((2, 2, 7, 7), "id", 1),
                                                 Blob((11, 11, 7, 7), "novel", 0))))
        idx = build_class_index(cfg, "none")
        u = score_bundle(bundle, idx).u
        ood = bundle.labels == OOD_LABEL
        assert u[ood].mean() > u[~ood].mean()


class TestSpecValidation:
    def test_rect_outside_image(self):
        with pytest.raises(ValidationError, match="rect"):
            build_fixture(_spec(blobs=(Blob((10, 10, 4, 4), "id", 0),)))

    def test_bad_class_index(self):
        with pytest.raises(ValidationError, match="class index"):
            build_fixture(_spec(blobs=(Blob((1, 1, 2, 2), "id", 9),)))

    def test_bad_ood_index(self):
        with pytest.raises(ValidationError, match="OOD prompt index"):
            build_fixture(_spec(blobs=(Blob((1, 1, 2, 2), "ood", 5),)))

    def test_margin_out_of_range(self):
        with pytest.raises(ValidationError, match="margin"):
            build_fixture(_spec(margin=2.5))

    def test_too_few_queries(self):
        with pytest.raises(ValidationError, match="n_queries"):
            build_fixture(_spec(n_queries=1))

    def test_unsatisfiable_margin(self):
        with pytest.raises(GenerationError, match="margin"):
            build_fixture(_spec(margin=1.2))

    def test_dimension_too_small_for_prototypes(self):
        with pytest.raises(GenerationError, match="orthogonal"):
            build_fixture(_spec(dim=3, id_class_count=8, n_queries=9,
                                blobs=(Blob((1, 1, 2, 2), "id", 0),)))


class TestSpecJson:
    def test_parse_roundtrip(self):
        doc = {
            "seed": 5,
            "n_queries": 3,
            "dim": 8,
            "height": 10,
            "width": 10,
            "id_class_count": 2,
            "ood_prompt_count": 0,
            "blobs": [{"rect": [1, 1, 3, 3], "kind": "id", "index": 1}],
        }
        spec = fixture_spec_from_json(json.dumps(doc))
        assert spec.seed == 5
        assert spec.blobs == (Blob((1, 1, 3, 3), "id", 1),)
        build_fixture(spec)

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError, match="unknown fields"):
            fixture_spec_from_json('{"seed": 1, "bogus": 2}')


def _one_hot_bundle():
    eye = np.eye(4, dtype=np.float32)
    return validate_bundle(
        InferenceBundle(
            mask_scores=np.ones((1, 3, 3), dtype=np.float32),
            vis_in=eye[:1],
            vis_out=eye[:1],
            text_raw=eye[:2],
            temperature=0.001,
            alpha=0.4,
            beta=0.8,
            class_names=("a", "b"),
            concept_index=(ConceptEntry("a", "a", (0,)), ConceptEntry("b", "b", (1,))),
        )
    )


class TestOracleUncertainty:
    def test_one_hot_single_query(self):
        bundle = _one_hot_bundle()
        idx = ClassIndex(groups=((0,), (1,)), id_channel_count=2)
        npt.assert_array_equal(
            oracle_uncertainty(bundle, idx), np.full((3, 3), -1.0, dtype=np.float32)
        )

    def test_channel_permutation_invariant(self):
        bundle, cfg = build_fixture(_spec())
        idx = build_class_index(cfg, "none")
        permuted = ClassIndex(groups=idx.groups[::-1], id_channel_count=idx.id_channel_count)
        npt.assert_array_equal(oracle_uncertainty(bundle, idx), oracle_uncertainty(bundle, permuted))

    def test_agrees_with_pipeline(self):
        bundle, cfg = build_fixture(_spec())
        idx = build_class_index(cfg, "none")
        got = score_bundle(bundle, idx).u.astype(np.float64)
        expected = oracle_uncertainty(bundle, idx).astype(np.float64)
        assert np.abs(got - expected).max() < 1e-5

    def test_sigmoid_branch_for_single_class(self):
        spec = _spec(id_class_count=1, ood_prompt_count=0,
                     blobs=(Blob((2, 2, 4, 4), "novel", 0),), n_queries=3)
        bundle, cfg = build_fixture(spec)
        idx = build_class_index(cfg, "none")
        got = score_bundle(bundle, idx).u.astype(np.float64)
        expected = oracle_uncertainty(bundle, idx).astype(np.float64)
        assert np.abs(got - expected).max() < 1e-5
        # sigmoid output varies across pixels; a softmax over one channel cannot
        assert np.std(got) > 1e-4


class TestRandomSpecs:
    def test_thirty_seeds_build_and_load(self, tmp_path):
        for seed in range(30):
            spec = random_fixture_spec(seed)
            bundle, cfg = build_fixture(spec)
            assert bundle.n_queries == spec.n_queries
        gen_fixture(random_fixture_spec(7), tmp_path / "d")
        load_bundle(tmp_path / "d")
