"""Manifests, image I/O and on-the-fly construction of training samples."""

import hashlib
import logging
import os
import queue
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .reference import (
    CorrespondenceGT,
    appearance_transform,
    correspondence_ground_truth,
    sample_jitter,
    sample_tps,
    tps_warp,
)
from .sketch import XDoGParams, extract_sketch

log = logging.getLogger(__name__)

SPLITS = ("train", "val")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
PREFETCH_BATCHES = 4
# Stream tags keep per-sample and per-epoch seed sequences disjoint.
SAMPLE_STREAM = 0
ORDER_STREAM = 1
TRIPLET_STREAM = 2


# ---------------------------------------------------------------------------
# image I/O


def load_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(array, path):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        array = np.clip(np.rint(array), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)


def sketch_to_uint8(sketch):
    return np.clip(np.rint(np.asarray(sketch) * 255.0), 0, 255).astype(np.uint8)


def resize_and_crop(image, size):
    """Scale the shorter side to ``size`` (bilinear), then center-crop a square."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    if min(h, w) != size:
        scale = size / min(h, w)
        new_w, new_h = max(size, round(w * scale)), max(size, round(h * scale))
        image = np.asarray(Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR))
        h, w = image.shape[:2]
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top:top + size, left:left + size]


def list_images(image_dir):
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"not a directory: {image_dir}")
    return sorted(p for p in image_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# manifests and pair lists


@dataclass
class ManifestEntry:
    path: Path
    split: str
    sketch_path: Optional[Path] = None


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def paths(self, split="train"):
        return [e.path for e in self.entries if e.split == split]

    def sketch_paths(self, split="train"):
        return [e.sketch_path for e in self.entries if e.split == split]

    def validate(self):
        seen = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r} for {e.path}")
            key = str(e.path)
            if key in seen and seen[key] != e.split:
                raise ValueError(f"{e.path} appears in both {seen[key]} and {e.split}")
            seen[key] = e.split
            if not Path(e.path).exists():
                raise FileNotFoundError(f"manifest entry does not exist: {e.path}")
            if e.sketch_path is not None and not Path(e.sketch_path).exists():
                raise FileNotFoundError(f"sketch does not exist: {e.sketch_path}")

    def save(self, path):
        with open(path, "w") as fh:
            for e in self.entries:
                row = [str(e.path), e.split] + ([str(e.sketch_path)] if e.sketch_path else [])
                fh.write(",".join(row) + "\n")


def load_manifest(path):
    """Parse ``path,split[,sketch_path]`` lines; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected path,split[,sketch_path]")
        img = base / parts[0]
        sketch = base / parts[2] if len(parts) == 3 and parts[2] else None
        if parts[1] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {parts[1]!r}")
        entries.append(ManifestEntry(img, parts[1], sketch))
    if not entries:
        warnings.warn(f"manifest {path} is empty", UserWarning)
    manifest = Manifest(entries)
    manifest.validate()
    return manifest


def auto_split(image_dir, seed=0, train_fraction=0.9):
    """Seeded shuffle of a directory into train/val at ``train_fraction``."""
    paths = list_images(image_dir)
    order = np.random.default_rng(seed).permutation(len(paths))
    n_train = int(round(train_fraction * len(paths)))
    entries = [
        ManifestEntry(paths[j], "train" if rank < n_train else "val")
        for rank, j in enumerate(order)
    ]
    entries.sort(key=lambda e: str(e.path))
    return Manifest(entries)


def load_pair_list(path):
    """Line-delimited ``sketch_path,reference_path``."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected sketch_path,reference_path")
        s, r = base / parts[0], base / parts[1]
        for p in (s, r):
            if not p.exists():
                raise FileNotFoundError(f"{path}:{lineno}: {p} does not exist")
        pairs.append((s, r))
    return pairs


# ---------------------------------------------------------------------------
# sketch cache


def default_cache_dir():
    return Path(os.environ.get("SCFT_CACHE_DIR", Path.home() / ".cache" / "scftcolor" / "sketches"))


class SketchCache:
    """On-disk PNG cache keyed by (image content hash, XDoG parameter hash).

    Layout: ``<root>/<params hash>/<image hash[:2]>/<image hash>.png``.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_cache_dir()

    @staticmethod
    def params_key(params):
        return hashlib.sha1(repr(sorted(asdict(params).items())).encode()).hexdigest()[:16]

    @staticmethod
    def image_key(image):
        image = np.ascontiguousarray(image)
        h = hashlib.sha1(str(image.shape).encode())
        h.update(image.tobytes())
        return h.hexdigest()

    def path_for(self, image, params):
        key = self.image_key(image)
        return self.root / self.params_key(params) / key[:2] / f"{key}.png"

    def get(self, image, params):
        path = self.path_for(image, params)
        if path.exists():
            with Image.open(path) as im:
                return np.asarray(im, dtype=np.float64) / 255.0
        sketch = extract_sketch(np.asarray(image, dtype=np.float64) / 255.0, params)
        quantized = sketch_to_uint8(sketch)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp.png")
        Image.fromarray(quantized).save(tmp)
        os.replace(tmp, path)
        return quantized.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# training samples


@dataclass
class SampleConfig:
    image_size: int = 256
    tps_grid: int = 5
    max_disp: float = 0.1
    jitter_amplitude: float = 50.0
    zero_ref_prob: float = 0.1
    xdog: XDoGParams = field(default_factory=XDoGParams)

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if not 0 <= self.zero_ref_prob <= 1:
            raise ValueError(f"zero_ref_prob must lie in [0, 1], got {self.zero_ref_prob}")

    @property
    def grid(self):
        return self.image_size // 16


@dataclass
class TrainingSample:
    sketch: np.ndarray  # (H, W) in [0, 1]
    reference: np.ndarray  # (H, W, 3) on 0-255; zeros when zero_reference
    ground_truth: np.ndarray  # (H, W, 3) on 0-255
    correspondence: CorrespondenceGT
    zero_reference: bool = False
    sample_id: tuple = ()

    def tensors(self):
        """Network-ready tensors in [-1, 1]; a zero reference stays all-zero."""
        sketch = torch.from_numpy(self.sketch * 2.0 - 1.0).float()[None]
        gt = torch.from_numpy(self.ground_truth / 127.5 - 1.0).float().permute(2, 0, 1)
        if self.zero_reference:
            ref = torch.zeros_like(gt)
        else:
            ref = torch.from_numpy(self.reference / 127.5 - 1.0).float().permute(2, 0, 1)
        return sketch, ref, gt


def sample_rng(global_seed, *key):
    """Independent generator for one (seed, key...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), *map(int, key)]))


def build_training_sample(image, cfg, rng, cache=None, sketch=None):
    """Build (I_s, I_r, I_gt, correspondence) from one image.

    ``image`` is a path or an (H, W, 3) uint8 array.  The sketch comes from
    the un-jittered image; ``sketch`` overrides it with a precomputed one.
    """
    if not isinstance(image, np.ndarray):
        image = load_rgb(image)
    image = resize_and_crop(image, cfg.image_size)
    if sketch is None:
        if cache is not None:
            sketch = cache.get(image, cfg.xdog)
        else:
            sketch = extract_sketch(image / 255.0, cfg.xdog)
    else:
        sketch = np.asarray(sketch, dtype=np.float64)
        if sketch.ndim == 3:
            sketch = sketch.mean(axis=2)
        if sketch.max() > 1.0:
            sketch = sketch / 255.0
        if sketch.shape != image.shape[:2]:
            sketch = np.asarray(
                Image.fromarray(sketch_to_uint8(sketch)).resize(image.shape[1::-1], Image.BILINEAR),
                dtype=np.float64,
            ) / 255.0
    jitter = sample_jitter(rng, cfg.jitter_amplitude)
    tps = sample_tps(rng, cfg.tps_grid, cfg.max_disp)
    zero_ref = bool(rng.random() < cfg.zero_ref_prob)
    gt = appearance_transform(image, jitter)
    if zero_ref:
        reference = np.zeros_like(gt)
        corr = CorrespondenceGT.invalid(cfg.grid, cfg.grid)
    else:
        reference = tps_warp(gt, tps)
        corr = correspondence_ground_truth(tps, cfg.grid, cfg.grid)
    return TrainingSample(sketch, reference, gt, corr, zero_ref)


class SampleSource:
    """Deterministic sample builder over a list of image paths (or arrays).

    Sample ``(epoch, index)`` always draws from ``sample_rng(seed,
    SAMPLE_STREAM, epoch, index)``, so it does not depend on which worker
    builds it.
    """

    def __init__(self, images, cfg, seed=0, cache=None, sketches=None):
        self.images = list(images)
        self.cfg = cfg
        self.seed = seed
        self.cache = cache
        self.sketches = list(sketches) if sketches is not None else [None] * len(self.images)
        self._decoded = {}

    def __len__(self):
        return len(self.images)

    def _image(self, index):
        img = self.images[index]
        if isinstance(img, np.ndarray):
            return resize_and_crop(img, self.cfg.image_size)
        if index not in self._decoded:
            self._decoded[index] = resize_and_crop(load_rgb(img), self.cfg.image_size)
        return self._decoded[index]

    def _sketch(self, index):
        s = self.sketches[index]
        if isinstance(s, np.ndarray):
            return s
        if s is None:
            if self.cache is not None:
                return None  # build_training_sample consults the disk cache
            s = extract_sketch(self._image(index) / 255.0, self.cfg.xdog)
            self.sketches[index] = s
            return s
        with Image.open(s) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0

    def sample(self, epoch, index):
        rng = sample_rng(self.seed, SAMPLE_STREAM, epoch, index)
        try:
            s = build_training_sample(self._image(index), self.cfg, rng, self.cache, self._sketch(index))
        except (OSError, ValueError) as exc:
            log.warning("skipping sample %d (%s): %s", index, self.images[index], exc)
            return None
        s.sample_id = (epoch, index)
        return s

    def epoch_order(self, epoch, shuffle=True):
        if not shuffle:
            return np.arange(len(self))
        return sample_rng(self.seed, ORDER_STREAM, epoch).permutation(len(self))

    def build(self, epoch, indices, workers=1):
        if workers <= 1:
            return [self.sample(epoch, int(i)) for i in indices]
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: self.sample(epoch, int(i)), indices))

    def batches(self, epoch, batch_size, shuffle=True, drop_last=False, workers=1):
        order = self.epoch_order(epoch, shuffle)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            samples = [s for s in self.build(epoch, idx, workers) if s is not None]
            if samples:
                yield samples


class Prefetcher:
    """Runs an iterator in a background thread through a bounded queue.

    Order is preserved; the queue holds at most ``capacity`` items.
    """

    _DONE = object()

    def __init__(self, iterable, capacity=PREFETCH_BATCHES):
        self.queue = queue.Queue(maxsize=capacity)
        self.error = None
        self.thread = threading.Thread(target=self._run, args=(iterable,), daemon=True)
        self.thread.start()

    def _run(self, iterable):
        try:
            for item in iterable:
                self.queue.put(item)
        except BaseException as exc:  # re-raised in the consumer
            self.error = exc
        finally:
            self.queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self.queue.get()
            if item is self._DONE:
                if self.error is not None:
                    raise self.error
                return
            yield item


def collate(samples):
    """Stack samples into (sketch, reference, gt) tensors plus correspondences."""
    tensors = [s.tensors() for s in samples]
    sketch = torch.stack([t[0] for t in tensors])
    ref = torch.stack([t[1] for t in tensors])
    gt = torch.stack([t[2] for t in tensors])
    return {
        "sketch": sketch,
        "reference": ref,
        "ground_truth": gt,
        "correspondence": [s.correspondence for s in samples],
        "zero_reference": [s.zero_reference for s in samples],
        "sample_id": [s.sample_id for s in samples],
    }
