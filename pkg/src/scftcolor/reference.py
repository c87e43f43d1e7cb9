"""Augmented-self reference generation.

A training image I yields the ground truth ``a(I)`` (per-channel colour
offsets) and the reference ``s(a(I))`` (thin-plate-spline warp).  Because
the warp is known, so is the position in the reference where every sketch
position's content ends up; that is the correspondence ground truth used by
the triplet loss.

Coordinates are normalized to the unit square, x to the right, y down.
Pixel (row i, col j) of an H x W image has its center at
((j + 0.5) / W, (i + 0.5) / H).
"""

import warnings
from dataclasses import dataclass

import numpy as np

MAX_SOLVE_ATTEMPTS = 10
WHITE = 255.0


# ---------------------------------------------------------------------------
# appearance transform


@dataclass(frozen=True)
class AppearanceJitter:
    offsets: tuple  # (r, g, b) on the 0-255 scale

    def __post_init__(self):
        if len(self.offsets) != 3:
            raise ValueError("need exactly three channel offsets")
        if any(abs(o) > 50 for o in self.offsets):
            raise ValueError(f"offsets must lie in [-50, 50], got {self.offsets}")


def sample_jitter(rng, amplitude=50.0):
    return AppearanceJitter(tuple(float(v) for v in rng.uniform(-amplitude, amplitude, 3)))


def appearance_transform(image, jitter):
    """Add one offset per RGB channel and clamp to [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    return np.clip(image + np.asarray(jitter.offsets), 0.0, 255.0)


# ---------------------------------------------------------------------------
# thin-plate spline


def _kernel(r):
    """U(r) = r^2 log r with U(0) = 0."""
    return _kernel_sq(r * r)


def _kernel_sq(d2):
    """U as a function of the squared distance: 0.5 * d2 * log(d2)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 0.5 * d2 * np.log(d2)
    return np.where(d2 > 0, out, 0.0)


def _sq_dist(points, centers):
    diff = points[:, None, :] - centers[None]
    return diff, np.einsum("nkc,nkc->nk", diff, diff)


def _sq_dist_fast(points, centers):
    d2 = (
        np.einsum("nc,nc->n", points, points)[:, None]
        - 2.0 * points @ centers.T
        + np.einsum("kc,kc->k", centers, centers)[None]
    )
    return np.maximum(d2, 0.0)


def lattice(grid_size):
    ticks = np.linspace(0.0, 1.0, grid_size)
    xs, ys = np.meshgrid(ticks, ticks)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


@dataclass
class TpsParams:
    """Forward warp: control point ``source_points[k]`` moves to
    ``source_points[k] + displacements[k]``."""

    grid_size: int
    source_points: np.ndarray  # (g*g, 2)
    displacements: np.ndarray  # (g*g, 2)
    weights: np.ndarray  # (g*g, 2) radial coefficients
    affine: np.ndarray  # (3, 2) rows: constant, x, y

    @property
    def target_points(self):
        return self.source_points + self.displacements

    def __call__(self, points):
        """Map (N, 2) source coordinates to reference coordinates."""
        points = np.asarray(points, dtype=np.float64)
        d2 = _sq_dist_fast(points, self.source_points)
        return self.affine[0] + points @ self.affine[1:] + _kernel_sq(d2) @ self.weights

    def jacobian(self, points):
        """(N, 2, 2) derivative of the forward map, [out, in]."""
        diff, d2 = _sq_dist(points, self.source_points)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(d2 > 0, np.log(d2) + 1.0, 0.0)  # dU/dp = coef * diff
        # sum_k w[k, out] * coef[k] * diff[k, in]
        jac = np.matmul((coef[..., None] * diff).transpose(0, 2, 1), self.weights)
        return jac.transpose(0, 2, 1) + self.affine[1:].T[None]

    def inverse(self, targets, iters=30, tol=1e-12, guess=None):
        """Solve F(x) = y by Newton's method.  Returns (points, converged)."""
        targets = np.asarray(targets, dtype=np.float64)
        x = 2.0 * targets - self(targets) if guess is None else guess
        for _ in range(iters):
            res = self(x) - targets
            err = np.abs(res).max(axis=1)
            if err.max(initial=0.0) < tol:
                break
            step = np.linalg.solve(self.jacobian(x), res[..., None])[..., 0]
            x = x - step
        else:
            err = np.abs(self(x) - targets).max(axis=1)
        return x, err < 1e-6

    def inverse_grid(self, height, width, coarse=8):
        """Inverse map at every pixel center of an H x W image.

        Newton is run to convergence on a grid ``coarse`` times sparser, and
        the bilinearly upsampled result seeds Newton at full resolution.
        """
        targets = pixel_centers(height, width)
        if height <= 2 * coarse or width <= 2 * coarse:
            return self.inverse(targets)
        ch, cw = -(-height // coarse) + 1, -(-width // coarse) + 1
        ys = np.linspace(0.5 / height, 1 - 0.5 / height, ch)
        xs = np.linspace(0.5 / width, 1 - 0.5 / width, cw)
        gx, gy = np.meshgrid(xs, ys)
        coarse_targets = np.stack([gx.ravel(), gy.ravel()], axis=1)
        coarse_src, _ = self.inverse(coarse_targets)
        offset = (coarse_src - coarse_targets).reshape(ch, cw, 2)
        # bilinear upsample of the inverse displacement
        fy = (targets[:, 1] - ys[0]) / (ys[-1] - ys[0]) * (ch - 1)
        fx = (targets[:, 0] - xs[0]) / (xs[-1] - xs[0]) * (cw - 1)
        guess = targets + bilinear_sample(offset, fx, fy, 0.0)
        return self.inverse(targets, guess=guess)


def solve_tps(source_points, displacements):
    n = len(source_points)
    r = np.linalg.norm(source_points[:, None] - source_points[None], axis=2)
    poly = np.hstack([np.ones((n, 1)), source_points])
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _kernel(r)
    system[:n, n:] = poly
    system[n:, :n] = poly.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = source_points + displacements
    coef = np.linalg.solve(system, rhs)
    return coef[:n], coef[n:]


def make_tps(source_points, displacements):
    source_points = np.asarray(source_points, dtype=np.float64)
    displacements = np.asarray(displacements, dtype=np.float64)
    weights, affine = solve_tps(source_points, displacements)
    grid_size = int(round(np.sqrt(len(source_points))))
    return TpsParams(grid_size, source_points, displacements, weights, affine)


def sample_tps(rng, grid_size=5, max_disp=0.1, jitter_points=0.0):
    """Draw a random TPS warp over a ``grid_size`` x ``grid_size`` lattice.

    ``jitter_points`` perturbs the lattice itself; it exists so the
    singular-system retry path can be exercised and is 0 in normal use.
    """
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    if not 0 <= max_disp < 0.5:
        raise ValueError(f"max_disp must lie in [0, 0.5), got {max_disp}")
    for _ in range(MAX_SOLVE_ATTEMPTS):
        source = lattice(grid_size)
        if jitter_points:
            source = source + rng.uniform(-jitter_points, jitter_points, source.shape)
        disp = rng.uniform(-max_disp, max_disp, source.shape)
        try:
            params = make_tps(source, disp)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(params.weights)) and np.all(np.isfinite(params.affine)):
            return params
    raise np.linalg.LinAlgError(
        f"TPS system singular after {MAX_SOLVE_ATTEMPTS} attempts"
    )


def identity_tps(grid_size=5):
    source = lattice(grid_size)
    return make_tps(source, np.zeros_like(source))


def pixel_centers(height, width):
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def bilinear_sample(image, u, v, fill):
    """Sample ``image`` at fractional pixel coordinates (u = col, v = row).

    Points more than half a pixel outside the image get ``fill``.
    """
    h, w = image.shape[:2]
    outside = (u < -0.5) | (u > w - 0.5) | (v < -0.5) | (v > h - 0.5)
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(u).astype(int), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    img = image.reshape(h, w, -1).astype(np.float64)
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bottom = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    out = top * (1 - fv) + bottom * fv
    out[outside] = fill
    return out


def tps_warp(image, params, fill=WHITE):
    """Backward-mapped warp: output(y) = image(F^-1(y)), bilinear sampling."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    src, ok = params.inverse_grid(h, w)
    u = src[:, 0] * w - 0.5
    v = src[:, 1] * h - 0.5
    u[~ok] = -np.inf
    out = bilinear_sample(image, u, v, fill).reshape(image.shape)
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# correspondence ground truth


@dataclass
class CorrespondenceGT:
    grid_h: int
    grid_w: int
    positive_index: np.ndarray  # (grid_h * grid_w,) int, -1 = invalid

    @property
    def valid(self):
        return self.positive_index >= 0

    @classmethod
    def invalid(cls, grid_h, grid_w):
        return cls(grid_h, grid_w, np.full(grid_h * grid_w, -1, dtype=np.int64))

    def to_text(self):
        rows = self.positive_index.reshape(self.grid_h, self.grid_w)
        return "\n".join(" ".join(str(int(v)) for v in row) for row in rows) + "\n"


def cell_of(points, grid_h, grid_w):
    """Flat cell index of each normalized point, -1 outside the unit square."""
    x, y = points[:, 0], points[:, 1]
    inside = (x >= 0) & (x < 1) & (y >= 0) & (y < 1)
    col = np.clip(np.floor(x * grid_w).astype(np.int64), 0, grid_w - 1)
    row = np.clip(np.floor(y * grid_h).astype(np.int64), 0, grid_h - 1)
    return np.where(inside, row * grid_w + col, -1)


def correspondence_ground_truth(params, grid_h, grid_w, subsamples=16):
    """Reference cell receiving the largest share of each sketch cell.

    Every cell is covered by a ``subsamples`` x ``subsamples`` lattice of
    points; each is mapped forward and the most frequent landing cell wins
    (-1 when most of the cell leaves the image).  Ties go to the cell hit
    by the cell center.
    """
    hw = grid_h * grid_w
    offsets = (np.arange(subsamples) + 0.5) / subsamples
    ox, oy = np.meshgrid(offsets, offsets)
    rows, cols = np.divmod(np.arange(hw), grid_w)
    px = (cols[:, None] + ox.ravel()[None]) / grid_w
    py = (rows[:, None] + oy.ravel()[None]) / grid_h
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    landed = cell_of(params(pts), grid_h, grid_w).reshape(hw, -1) + 1  # 0 = outside
    counts = np.zeros((hw, hw + 1), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(hw), landed.shape[1]), landed.ravel()), 1)
    center = cell_of(params(pixel_centers(grid_h, grid_w)), grid_h, grid_w) + 1
    best = counts.max(axis=1)
    center_wins = counts[np.arange(hw), center] == best
    positive = np.where(center_wins, center, counts.argmax(axis=1)) - 1
    return CorrespondenceGT(grid_h, grid_w, positive)


# ---------------------------------------------------------------------------
# triplets


@dataclass(frozen=True)
class TripletSample:
    query_index: int
    positive_index: int
    negative_index: int


def triplet_indices(gt, n, rng):
    """Vectorized triplet draw; returns (query, positive, negative) int arrays."""
    valid = np.flatnonzero(gt.valid)
    hw = gt.grid_h * gt.grid_w
    if n == 0 or len(valid) == 0:
        if n and len(valid) == 0:
            warnings.warn("no valid correspondences; no triplets sampled", RuntimeWarning)
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    if hw < 2:
        raise ValueError("need at least two reference positions")
    query = valid[rng.integers(0, len(valid), n)]
    positive = gt.positive_index[query]
    negative = rng.integers(0, hw - 1, n)
    negative = negative + (negative >= positive)
    return query, positive, negative


def sample_triplets(gt, n, rng):
    q, p, neg = triplet_indices(gt, n, rng)
    return [TripletSample(int(a), int(b), int(c)) for a, b, c in zip(q, p, neg)]
