import json
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from scftcolor.metrics import (
    FidStats,
    KeypointPair,
    RunningMoments,
    ToyExtractor,
    collect_fid_stats,
    fid,
    import_spair,
    psnr,
    read_pair_records,
    sc_psnr,
    write_pair_records,
)


def fid_oracle(a, b):
    """Closed form with a dense non-symmetric eigen-solve of S_a S_b."""
    eig = np.linalg.eigvals(a.cov @ b.cov)
    tr_sqrt = np.sum(np.sqrt(np.clip(eig.real, 0, None)))
    diff = a.mean - b.mean
    return diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt


def whole_image_pair(h, w):
    return [KeypointPair(w // 2, h // 2, w // 2, h // 2)]


class TestScPsnr:
    def test_identical_is_inf(self, rng):
        img = rng.integers(0, 256, (20, 20, 3))
        assert sc_psnr(img, img, [(5, 5, 5, 5)]) == math.inf

    @pytest.mark.parametrize("size", [16, 17])
    def test_whole_image_equals_psnr(self, rng, size):
        a = rng.integers(0, 256, (size, size, 3))
        b = rng.integers(0, 256, (size, size, 3))
        assert sc_psnr(a, b, whole_image_pair(size, size), patch=size) == pytest.approx(psnr(a, b), abs=1e-9)

    def test_constant_offset_closed_form(self):
        a = np.full((32, 32, 3), 100.0)
        b = a + 16
        expected = 10 * math.log10(65025 / 256)
        assert sc_psnr(a, b, [(10, 10, 20, 20), (5, 25, 25, 5)]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(24.05, abs=5e-3)

    def test_outside_content_ignored(self, rng):
        a = rng.integers(0, 256, (40, 40, 3)).astype(float)
        b = rng.integers(0, 256, (40, 40, 3)).astype(float)
        pairs = [(10, 10, 12, 9), (30, 28, 27, 30)]
        before = sc_psnr(a, b, pairs, patch=5)
        mask = np.ones((40, 40), bool)
        for x, y in [(10, 10), (30, 28)]:
            mask[y - 2:y + 3, x - 2:x + 3] = False
        a2 = a.copy()
        a2[mask] = 0
        assert sc_psnr(a2, b, pairs, patch=5) == before

    def test_border_windows_clipped_consistently(self):
        a = np.zeros((10, 10))
        b = np.zeros((10, 10))
        b[:2, :2] = 10
        # the 3x3 corner window keeps only its in-bounds 2x2 block, all off by 10
        assert sc_psnr(a, b, [(0, 0, 0, 0)], patch=3) == pytest.approx(10 * math.log10(65025 / 100))

    def test_errors(self):
        with pytest.raises(ValueError):
            sc_psnr(np.zeros((4, 4)), np.zeros((4, 4)), [])
        with pytest.raises(ValueError):
            sc_psnr(np.zeros((4, 4)), np.zeros((4, 4)), [(100, 100, 100, 100)])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_monotone_under_noise(self, seed):
        r = np.random.default_rng(seed)
        a = r.integers(64, 192, (48, 48, 3)).astype(float)
        noise = r.standard_normal(a.shape)
        pairs = [(r.integers(4, 44), r.integers(4, 44), r.integers(4, 44), r.integers(4, 44)) for _ in range(5)]
        pairs = [(x, y, x, y) for x, y, _, _ in pairs]
        scores = [sc_psnr(a, a + amp * noise, pairs) for amp in (4, 8, 16, 32)]
        assert all(s1 > s2 for s1, s2 in zip(scores, scores[1:]))

    def test_pair_records_roundtrip(self, tmp_path):
        recs = [{"src": "a.png", "ref": "b.png", "pairs": [[1, 2, 3, 4]]}]
        write_pair_records(recs, tmp_path / "p.jsonl")
        back = read_pair_records(tmp_path / "p.jsonl")
        assert back[0]["pairs"] == [KeypointPair(1, 2, 3, 4)]
        (tmp_path / "bad.jsonl").write_text('{"src": "a"}\n')
        with pytest.raises(ValueError):
            read_pair_records(tmp_path / "bad.jsonl")

    def test_import_spair(self, tmp_path):
        ann = {"src_imname": "x.jpg", "trg_imname": "y.jpg", "category": "cat",
               "src_kps": [[1, 2], [3, 4]], "trg_kps": [[5, 6], [7, 8]]}
        (tmp_path / "a.json").write_text(json.dumps(ann))
        rec = import_spair([tmp_path / "a.json"])[0]
        assert rec == {"src": "cat/x.jpg", "ref": "cat/y.jpg", "pairs": [[1.0, 2.0, 5.0, 6.0], [3.0, 4.0, 7.0, 8.0]]}


class TestFid:
    def test_identical(self, rng):
        s = FidStats.from_features(rng.normal(size=(50, 4)))
        assert abs(fid(s, s)) < 1e-6

    def test_unit_gaussians(self):
        assert fid(FidStats([0.0], [[1.0]], 2), FidStats([3.0], [[1.0]], 2)) == pytest.approx(9.0, abs=1e-9)

    def test_random_matches_oracles(self, rng):
        a = FidStats.from_features(rng.normal(size=(40, 5)))
        b = FidStats.from_features(rng.normal(size=(30, 5)) * 2 + 1)
        got = fid(a, b)
        assert got == pytest.approx(fid_oracle(a, b), rel=1e-6)
        sq = scipy.linalg.sqrtm(a.cov @ b.cov).real
        diff = a.mean - b.mean
        assert got == pytest.approx(diff @ diff + np.trace(a.cov + b.cov - 2 * sq), rel=1e-6)

    def test_symmetric(self, rng):
        a = FidStats.from_features(rng.normal(size=(20, 6)))
        b = FidStats.from_features(rng.normal(size=(20, 6)) + 0.3)
        assert fid(a, b) == fid(b, a)

    def test_rejects_bad_stats(self):
        with pytest.raises(ValueError):
            fid(FidStats([np.nan], [[1.0]], 2), FidStats([0.0], [[1.0]], 2))
        with pytest.raises(ValueError):
            fid(FidStats([0.0], [[1.0]], 2), FidStats([0.0, 1.0], np.eye(2), 2))
        with pytest.raises(ValueError):
            FidStats.from_features(np.zeros((1, 3)))

    def test_stats_roundtrip(self, tmp_path, rng):
        s = FidStats.from_features(rng.normal(size=(10, 3)))
        s.save(tmp_path / "s.npz")
        t = FidStats.load(tmp_path / "s.npz")
        assert np.array_equal(s.mean, t.mean) and np.array_equal(s.cov, t.cov) and t.count == 10


class TestRunningMoments:
    def test_repeated_sample_zero_cov(self):
        acc = RunningMoments(3)
        for _ in range(10):
            acc.update(np.array([[1.0, 2.0, 3.0]]))
        assert np.allclose(acc.stats().cov, 0)

    def test_matches_two_pass(self, rng):
        feats = rng.normal(size=(257, 6)) * 5 + 100
        acc = RunningMoments(6)
        for chunk in np.array_split(feats, 13):
            acc.update(chunk)
        mean = feats.sum(0) / len(feats)
        centered = feats - mean
        cov = centered.T @ centered / (len(feats) - 1)
        s = acc.stats()
        assert np.abs(s.mean - mean).max() < 1e-8
        assert np.abs(s.cov - cov).max() < 1e-8

    def test_merge_associative(self, rng):
        parts = [rng.normal(size=(n, 3)) for n in (5, 7, 11)]
        left = RunningMoments(3).update(parts[0]).merge(RunningMoments(3).update(parts[1]).update(parts[2]))
        right = RunningMoments(3).update(parts[0]).update(parts[1]).merge(RunningMoments(3).update(parts[2]))
        assert np.allclose(left.stats().cov, right.stats().cov, atol=1e-12)

    def test_too_few(self):
        with pytest.raises(ValueError):
            RunningMoments(2).update(np.zeros((1, 2))).stats()

    def test_collect(self, tmp_path, rng):
        for i in range(5):
            Image.fromarray(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)).save(tmp_path / f"{i}.png")
        ext = ToyExtractor()
        stats = collect_fid_stats(tmp_path, ext, batch_size=2)
        assert stats.count == 5 and stats.cov.shape == (64, 64)
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValueError):
            collect_fid_stats(empty, ext)
