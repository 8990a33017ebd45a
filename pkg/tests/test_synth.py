import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alter.graph import load_dataset, pearson_matrix
from alter.synth import (
    SynthConfig,
    expected_pair_correlation,
    generate_dataset,
    generate_subject,
    ring_distance,
    subject_seed,
)


def mean_corr(cfg, label, n_subjects, offset=0):
    acc = np.zeros((cfg.n_rois, cfg.n_rois))
    for s in range(n_subjects):
        acc += pearson_matrix(generate_subject(cfg, label, offset + s))
    return acc / n_subjects


class TestConfig:
    def test_defaults(self):
        cfg = SynthConfig()
        assert (cfg.n_rois, cfg.timepoints, cfg.subjects_per_class) == (40, 200, 200)
        assert cfg.min_ring_distance == 10
        assert all(ring_distance(i, j, 40) >= 10 for i, j in cfg.planted_pairs)

    def test_planted_pairs_cross_communities(self):
        cfg = SynthConfig()
        assert all(cfg.community_of(i) != cfg.community_of(j) for i, j in cfg.planted_pairs)

    @pytest.mark.parametrize("bad", [
        {"planted_pairs": [(0, 5)]},
        {"planted_pairs": [(0, 20), (20, 0)]},
        {"planted_pairs": [(0, 40)]},
        {"planted_pairs": [(3, 3)]},
        {"beta": 0.0},
        {"sigma": -1.0},
        {"n_communities": 0},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(**bad)

    def test_dict_round_trip(self):
        cfg = SynthConfig(seed=9, beta=0.7)
        assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            SynthConfig.from_dict({"gamma": 1.0})

    @given(i=st.integers(0, 39), j=st.integers(0, 39))
    def test_ring_distance_symmetric_bounded(self, i, j):
        assert ring_distance(i, j, 40) == ring_distance(j, i, 40) <= 20


class TestSubject:
    def test_shape_and_determinism(self):
        cfg = SynthConfig()
        a = generate_subject(cfg, 1, 42)
        assert a.values.shape == (200, 40)
        assert np.array_equal(a.values, generate_subject(cfg, 1, 42).values)
        assert not np.array_equal(a.values, generate_subject(cfg, 1, 43).values)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            generate_subject(SynthConfig(), 2, 0)

    def test_small_noise_same_community_near_one(self):
        cfg = SynthConfig(sigma=1e-4, planted_pairs=[])
        c = pearson_matrix(generate_subject(cfg, 0, 1))
        assert c[0, 1] > 0.999

    def test_closed_form_pair_correlation(self):
        cfg = SynthConfig()
        i, j = cfg.planted_pairs[0]
        assert expected_pair_correlation(cfg, 1) - expected_pair_correlation(cfg, 0) >= 0.2
        for label in (0, 1):
            est = np.mean([pearson_matrix(generate_subject(cfg, label, s))[i, j] for s in range(10_000)])
            # sample correlation carries an O(1/T) bias; 0.005 covers it and the MC error
            assert est == pytest.approx(expected_pair_correlation(cfg, label), abs=0.005)

    def test_off_plant_entries_match_across_classes(self):
        cfg = SynthConfig()
        diff = np.abs(mean_corr(cfg, 1, 500) - mean_corr(cfg, 0, 500, offset=10_000))
        mask = np.ones_like(diff, dtype=bool)
        for i, j in cfg.planted_pairs:
            mask[i, j] = mask[j, i] = False
        assert diff[mask].max() < 0.05
        assert min(diff[i, j] for i, j in cfg.planted_pairs) > 0.3

    def test_edge_present_only_in_class_one(self):
        cfg = SynthConfig()
        i, j = cfg.planted_pairs[0]
        hits = [[pearson_matrix(generate_subject(cfg, lab, s))[i, j] >= 0.3 for s in range(100)] for lab in (0, 1)]
        assert np.mean(hits[1]) > 0.95 and np.mean(hits[0]) < 0.05

    def test_marginal_variance_equal_across_classes(self):
        cfg = SynthConfig(timepoints=5000)
        i, _ = cfg.planted_pairs[0]
        v0 = generate_subject(cfg, 0, 1).values[:, i].var()
        v1 = generate_subject(cfg, 1, 2).values[:, i].var()
        assert v0 == pytest.approx(v1, rel=0.1)


class TestDataset:
    def small(self, **kw):
        return SynthConfig(subjects_per_class=6, timepoints=50, **kw)

    def test_balanced_and_ids(self):
        ds = generate_dataset(self.small())
        assert len(ds) == 12 and sum(ds.labels) == 6
        assert ds.subject_ids[:2] == ["sub-0000", "sub-0001"]

    def test_subject_seeds_distinct(self):
        cfg = SynthConfig()
        assert len({subject_seed(cfg, i) for i in range(400)}) == 400

    def test_byte_identical_regeneration(self, tmp_path):
        generate_dataset(self.small(), tmp_path / "a")
        generate_dataset(self.small(), tmp_path / "b")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_round_trip(self, tmp_path):
        ds = generate_dataset(self.small(seed=3), tmp_path)
        back = load_dataset(tmp_path)
        assert back.labels == ds.labels and back.subject_ids == ds.subject_ids
        for a, b in zip(ds.series, back.series):
            assert np.array_equal(a.values, b.values)
        for a, b in zip(ds.graphs, back.graphs):
            assert np.array_equal(a.a, b.a)
        manifest = json.loads((tmp_path / "synth_manifest.json").read_text())
        assert manifest == self.small(seed=3).to_dict()
