import dataclasses
import math
from itertools import combinations

import numpy as np
import pytest

from vickam.fftcorr import gen_action_maps, xcorr_fft
from vickam.synthgen import (GroupSample, Placement, SynthConfig, default_layout, gen_dataset,
                             gen_templates, load_annotated, load_groups, load_truth, make_sample,
                             read_manifest, save_dataset)


def cosine(a, b):
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def has_local_max_near(surface, i, j, radius=1):
    h, w = surface.shape
    for u in range(max(0, i - radius), min(h, i + radius + 1)):
        for v in range(max(0, j - radius), min(w, j + radius + 1)):
            hood = surface[max(0, u - 1):u + 2, max(0, v - 1):v + 2]
            if surface[u, v] >= hood.max():
                return True
    return False


class TestTemplates:
    def test_single(self):
        t = gen_templates(1, 5, 4, 0)
        assert len(t) == 1 and t[0].shape == (5, 5, 4)

    def test_frozen_cosines(self):
        t = gen_templates(3, 5, 4, 2024)
        got = [cosine(t[i], t[j]) for i, j in combinations(range(3), 2)]
        np.testing.assert_allclose(got, [0.14021636417988576, -0.018692828328153777, 0.08196479510523136],
                                   rtol=0, atol=1e-12)
        assert max(abs(c) for c in got) <= 0.3

    @pytest.mark.parametrize("seed", range(5))
    def test_near_orthogonal(self, seed):
        t = gen_templates(6, 3, 4, seed)
        for a, b in combinations(t, 2):
            assert abs(cosine(a, b)) <= 0.3

    def test_deterministic(self):
        a, b = gen_templates(4, 5, 2, 9), gen_templates(4, 5, 2, 9)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_unsatisfiable(self):
        with pytest.raises(ValueError, match="retries"):
            gen_templates(4, 1, 1, 0, max_retries=50)


class TestSamples:
    def test_noiseless_single_stamp(self):
        cfg = SynthConfig(K_g=1, K_a=1, h=12, w=14, C=3, p=5, noise_sigma=0.0)
        t = gen_templates(1, 5, 3, 0)
        grid, boxes, inst = make_sample(cfg, t, [[Placement(0, (6.0, 5.0), 0.0, 1)]], 0, 1)
        expect = np.zeros((12, 14, 3), dtype=np.float32)
        expect[3:8, 4:9] = t[0]
        np.testing.assert_array_equal(grid, expect)
        assert inst == [(0, 5, 6)]
        b = boxes[0]
        assert (b.x0, b.y0, b.x1, b.y1, b.action_id) == (3.5, 2.5, 8.5, 7.5, 0)

    def test_matched_filter_peak(self):
        cfg = SynthConfig(K_g=1, K_a=1, h=16, w=20, C=4, p=5, noise_sigma=0.0)
        t = gen_templates(1, 5, 4, 3)
        grid, _, inst = make_sample(cfg, t, [[Placement(0, (11.0, 7.0), 0.0, 1)]], 0, 1)
        m = xcorr_fft(grid, t[0])
        assert np.unravel_index(np.argmax(m), m.shape) == (inst[0][1], inst[0][2])

    def test_boxes_cover_stamps(self):
        cfg = SynthConfig(n_train=8, n_test=0, noise_sigma=0.0, instance_noise=0.0)
        ds = gen_dataset(cfg)
        q = cfg.p // 2
        for s, inst in zip(ds.train, ds.truth["instances"]["train"]):
            assert len(s.boxes) == len(inst)
            for b, (a, i, j) in zip(s.boxes, inst):
                assert b.action_id == a
                assert (b.x0 + b.x1) / 2 == j and (b.y0 + b.y1) / 2 == i
                assert b.x1 - b.x0 == cfg.p and b.y1 - b.y0 == cfg.p
                assert q + 1 <= i <= cfg.h - q - 2 and q + 1 <= j <= cfg.w - q - 2

    @pytest.mark.parametrize("sigma", [0.0, 0.02, 0.05])
    def test_peak_property(self, sigma):
        cfg = SynthConfig(noise_sigma=sigma, n_train=60, n_test=0, seed=5)
        ds = gen_dataset(cfg)
        hits = total = 0
        for s, inst in zip(ds.train, ds.truth["instances"]["train"]):
            maps = gen_action_maps(s.grid, ds.truth["templates"])
            for a, i, j in inst:
                total += 1
                hits += has_local_max_near(maps[a], i, j)
        assert hits / total >= 0.95


class TestLayout:
    @pytest.mark.parametrize("hard", [False, True])
    def test_within_grid_at_three_sigma(self, hard):
        for h, w, p in [(24, 32, 5), (16, 20, 3), (12, 12, 5)]:
            q = p // 2
            for acts in default_layout(4, 3, h, w, p, hard):
                for pl in acts:
                    x, y = pl.mean
                    assert q + 1 <= x - 3 * pl.std and x + 3 * pl.std <= w - q - 2
                    assert q + 1 <= y - 3 * pl.std and y + 3 * pl.std <= h - q - 2
                    assert pl.count >= 0

    def test_hard_multisets_identical(self):
        layout = default_layout(4, 3, 24, 32, 5, hard=True)
        sigs = [sorted((pl.action, pl.count) for pl in acts) for acts in layout]
        assert all(s == sigs[0] for s in sigs)

    def test_odd_activities_mirror(self):
        layout = default_layout(4, 3, 24, 32, 5)
        for g in (1, 3):
            for a, b in zip(layout[g - 1], layout[g]):
                assert b.mean[0] == pytest.approx(31 - a.mean[0])
                assert b.mean[1] == a.mean[1]

    def test_hard_pooled_means_match(self):
        cfg = SynthConfig(n_train=100, n_test=0, hard_variant=True)
        ds = gen_dataset(cfg)
        X = np.stack([s.grid for s in ds.train]).astype(np.float64)
        y = np.array([s.group for s in ds.train])
        means = np.stack([X[y == g].mean(axis=(0, 1, 2)) for g in range(cfg.K_g)])
        n_per = 100 // cfg.K_g
        tol = 4 * math.sqrt(2) * cfg.noise_sigma / math.sqrt(cfg.h * cfg.w * n_per)
        assert np.abs(means[:, None] - means[None]).max() <= tol


class TestDataset:
    def test_deterministic(self):
        cfg = SynthConfig(h=12, w=16, p=3, n_train=10, n_test=5)
        a, b = gen_dataset(cfg), gen_dataset(dataclasses.replace(cfg))
        for s, t in zip(a.train + a.test, b.train + b.test):
            assert s.grid.tobytes() == t.grid.tobytes() and s.group == t.group

    def test_seed_changes_data(self):
        a = gen_dataset(SynthConfig(h=12, w=16, p=3, n_train=2, n_test=0, seed=1))
        b = gen_dataset(SynthConfig(h=12, w=16, p=3, n_train=2, n_test=0, seed=2))
        assert a.train[0].grid.tobytes() != b.train[0].grid.tobytes()

    def test_balanced_groups(self):
        ds = gen_dataset(SynthConfig(h=12, w=16, p=3, n_train=12, n_test=8))
        assert [s.group for s in ds.train] == [i % 4 for i in range(12)]

    def test_firewall(self):
        ds = gen_dataset(SynthConfig(h=12, w=16, p=3, n_train=4, n_test=4))
        for s in ds.train_groups + ds.test:
            assert isinstance(s, GroupSample)
            assert {f.name for f in dataclasses.fields(s)} == {"grid", "group"}

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            gen_dataset(SynthConfig(h=4, w=4, p=5))

    def test_save_and_load(self, tmp_path):
        ds = gen_dataset(SynthConfig(h=12, w=16, p=3, n_train=6, n_test=3))
        save_dataset(ds, tmp_path / "d")
        manifest = read_manifest(tmp_path / "d")
        assert manifest["sizes"] == {"K_g": 4, "K_a": 3, "h": 12, "w": 16, "C": 4, "p": 3}
        assert all("boxes" not in e for e in manifest["test"])
        train = load_annotated(tmp_path / "d")
        for a, b in zip(train, ds.train):
            assert a.grid.tobytes() == b.grid.tobytes() and a.boxes == b.boxes and a.group == b.group
        test = load_groups(tmp_path / "d", "test")
        assert [s.group for s in test] == [s.group for s in ds.test]
        truth = load_truth(tmp_path / "d")
        assert truth["templates"].shape == (3, 3, 3, 4)

    def test_config_json_round_trip(self):
        cfg = SynthConfig(K_g=2, K_a=2, h=10, w=12, C=2, p=3, placements=default_layout(2, 2, 10, 12, 3))
        back = SynthConfig.from_json(cfg.to_json())
        assert back.resolved_placements() == cfg.resolved_placements()
