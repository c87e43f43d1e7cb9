"""SC-PSNR and FID.

SC-PSNR compares two images only inside small windows around annotated
corresponding keypoints; FID compares Gaussian fits of deep features.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_PATCH = 8


# ---------------------------------------------------------------------------
# SC-PSNR


@dataclass(frozen=True)
class KeypointPair:
    x_s: float
    y_s: float
    x_r: float
    y_r: float


def _window(patch):
    lo = -(patch // 2)
    return np.arange(lo, lo + patch)


def patch_squared_errors(img_a, img_b, pairs, patch=DEFAULT_PATCH):
    """Squared differences over all keypoint windows.

    Windows are ``patch`` pixels wide, centered on the rounded keypoint
    (even sizes extend one pixel further up/left).  An offset is kept only if
    it lands inside both images, so both windows are clipped identically.
    Overlapping windows count shared pixels once per window.
    """
    if len(pairs) == 0:
        raise ValueError("need at least one keypoint pair")
    if patch < 1:
        raise ValueError(f"patch must be >= 1, got {patch}")
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if b.ndim == 2:
        b = b[..., None]
    if a.shape[2] != b.shape[2]:
        raise ValueError("images differ in channel count")
    off = _window(patch)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    chunks = []
    for p in pairs:
        if not isinstance(p, KeypointPair):
            p = KeypointPair(*p)
        ya, xa = int(round(p.y_s)) + dy, int(round(p.x_s)) + dx
        yb, xb = int(round(p.y_r)) + dy, int(round(p.x_r)) + dx
        keep = (
            (ya >= 0) & (ya < a.shape[0]) & (xa >= 0) & (xa < a.shape[1])
            & (yb >= 0) & (yb < b.shape[0]) & (xb >= 0) & (xb < b.shape[1])
        )
        diff = a[ya[keep], xa[keep]] - b[yb[keep], xb[keep]]
        chunks.append((diff ** 2).ravel())
    return np.concatenate(chunks)


def psnr_from_mse(mse, peak=255.0):
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def psnr(img_a, img_b, peak=255.0):
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def sc_psnr(img_a, img_b, pairs, patch=DEFAULT_PATCH):
    """PSNR (dB, 0-255 scale) over keypoint windows; ``inf`` when identical."""
    sq = patch_squared_errors(img_a, img_b, pairs, patch)
    if sq.size == 0:
        raise ValueError("every keypoint window lies outside the images")
    return psnr_from_mse(float(sq.mean()))


def read_pair_records(path):
    """Line-delimited JSON records ``{"src", "ref", "pairs": [[xs, ys, xr, yr], ...]}``."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if not {"src", "ref", "pairs"} <= rec.keys():
                raise ValueError(f"{path}:{lineno}: record needs src, ref and pairs")
            rec["pairs"] = [KeypointPair(*map(float, p)) for p in rec["pairs"]]
            records.append(rec)
    return records


def write_pair_records(records, path):
    with open(path, "w") as fh:
        for rec in records:
            pairs = [
                [p.x_s, p.y_s, p.x_r, p.y_r] if isinstance(p, KeypointPair) else list(p)
                for p in rec["pairs"]
            ]
            fh.write(json.dumps({"src": rec["src"], "ref": rec["ref"], "pairs": pairs}) + "\n")


def import_spair(annotation_paths):
    """Convert SPair-71k pair annotations into pair records.

    Each SPair json carries ``src_imname``, ``trg_imname``, ``src_kps`` and
    ``trg_kps`` (lists of [x, y]); keypoints are matched by list position.
    """
    records = []
    for path in annotation_paths:
        with open(path) as fh:
            ann = json.load(fh)
        src_kps, trg_kps = ann["src_kps"], ann["trg_kps"]
        if len(src_kps) != len(trg_kps):
            raise ValueError(f"{path}: keypoint counts differ")
        pairs = [[float(a[0]), float(a[1]), float(b[0]), float(b[1])] for a, b in zip(src_kps, trg_kps)]
        category = ann.get("category", "")
        prefix = f"{category}/" if category else ""
        records.append({"src": prefix + ann["src_imname"], "ref": prefix + ann["trg_imname"], "pairs": pairs})
    return records


# ---------------------------------------------------------------------------
# FID


@dataclass
class FidStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dim {d}")

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise ValueError("need an (N >= 2, D) feature matrix")
        return cls(feats.mean(0), np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], -1), len(feats))

    def save(self, path):
        np.savez(path, mean=self.mean, cov=self.cov, count=self.count)

    @classmethod
    def load(cls, path):
        z = np.load(path)
        return cls(z["mean"], z["cov"], int(z["count"]))


def _sym_sqrt(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(cov_a, cov_b, neg_tol):
    """Tr((S_a S_b)^1/2) via the symmetric PSD form S_a^1/2 S_b S_a^1/2."""
    root_a = _sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    if eig.min(initial=0.0) < -neg_tol * max(1.0, np.abs(eig).max(initial=0.0)):
        raise ValueError(f"covariance product has a negative eigenvalue {eig.min():.3g}")
    return np.sqrt(np.clip(eig, 0, None)).sum()


def fid(a, b, neg_tol=1e-6):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Both factorization orders are averaged so the result is exactly
    symmetric in its arguments.
    """
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise ValueError("non-finite statistics")
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    tr_sqrt = (_trace_sqrt_product(a.cov, b.cov, neg_tol) + _trace_sqrt_product(b.cov, a.cov, neg_tol)) / 2
    diff = a.mean - b.mean
    return float(diff @ diff + (np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_sqrt)


class RunningMoments:
    """One-pass mean / covariance accumulator with an associative merge.

    Chunks are centered on their own mean before being folded in with the
    pairwise (Chan) update, so merge order perturbs results only at the
    level of float64 rounding.
    """

    def __init__(self, dim):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, feats):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if feats.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {feats.shape[1]}")
        n = len(feats)
        if n == 0:
            return self
        mean = feats.mean(0)
        centered = feats - mean
        other = RunningMoments(self.dim)
        other.count, other.mean, other.m2 = n, mean, centered.T @ centered
        return self.merge(other)

    def merge(self, other):
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / n)
        self.count = n
        return self

    def stats(self):
        if self.count < 2:
            raise ValueError("need at least two samples")
        cov = self.m2 / (self.count - 1)
        return FidStats(self.mean.copy(), (cov + cov.T) / 2, self.count)


def collect_fid_stats(image_dir, extractor, batch_size=16):
    """Stream every image under ``image_dir`` through ``extractor``.

    ``extractor`` maps a list of (H, W, 3) uint8 arrays to an (N, D) array
    and exposes ``dim``.
    """
    from .data import list_images, load_rgb

    paths = list_images(image_dir)
    if not paths:
        raise ValueError(f"no images found in {image_dir}")
    acc = RunningMoments(extractor.dim)
    for i in range(0, len(paths), batch_size):
        batch = [load_rgb(p) for p in paths[i:i + batch_size]]
        acc.update(extractor(batch))
    return acc.stats()


class ToyExtractor:
    """Fixed random 64-d embedding: 8x8 average pool + seeded projection.

    Cheap and deterministic; used for tests and smoke runs, not for
    numbers comparable to published FID scores.
    """

    dim = 64

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((8 * 8 * 3, self.dim)) / math.sqrt(8 * 8 * 3)

    def __call__(self, images):
        from PIL import Image

        rows = []
        for img in images:
            small = np.asarray(Image.fromarray(np.asarray(img, dtype=np.uint8)).resize((8, 8), Image.BILINEAR),
                               dtype=np.float64) / 255.0
            rows.append(np.tanh(small.reshape(-1) @ self.proj))
        return np.stack(rows)


class TorchScriptExtractor:
    """Frozen TorchScript model file mapping (N, 3, H, W) in [0, 1] to (N, D)."""

    def __init__(self, path, size=299):
        import torch

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"feature extractor not found: {path}")
        self.model = torch.jit.load(str(path), map_location="cpu").eval()
        self.size = size
        with torch.no_grad():
            self.dim = int(self.model(torch.zeros(1, 3, size, size)).reshape(1, -1).shape[1])

    def __call__(self, images):
        import torch
        import torch.nn.functional as F

        x = torch.stack([torch.from_numpy(np.asarray(i, dtype=np.float32) / 255.0).permute(2, 0, 1) for i in images])
        x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        with torch.no_grad():
            return self.model(x).reshape(len(images), -1).double().numpy()
