"""Block matching: group similar patches around each reference position.

For a reference patch, every valid patch origin within a square search
window is scored with the hard-thresholded normalized quadratic distance
d(p, q) = ||gamma(p) - gamma(q)||^2 / k^2. Candidates under the distance
threshold are kept, sorted by distance (raster order breaks ties), and
truncated to the group-size cap, forming a 3D group with the reference
always first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import ImageBuffer, Patch

# Sigma at or below which the matching distance uses no hard thresholding,
# and the threshold slope applied above it (both in [0, 1] intensity units
# for sigma; slope follows the usual block-matching convention).
LAMBDA_2D_SIGMA_CUTOFF = 40.0 / 255.0
LAMBDA_2D_HIGH_SIGMA = 2.0


@dataclass(frozen=True)
class BlockMatchConfig:
    """Matching parameters. Distances are intensity^2 per pixel.

    ``lambda_2d=None`` resolves to 0 for sigma <= 40/255 and to 2.0 above.
    """

    k: int = 8
    stride: int = 4
    search_radius: int = 19
    n_hard: int = 16
    tau_hard: float = 2500.0 / 255.0**2
    sigma: float = 0.1
    lambda_2d: float | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"patch size k must be >= 2, got {self.k}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.search_radius < 0:
            raise ValueError(f"search_radius must be >= 0, got {self.search_radius}")
        if self.n_hard < 1:
            raise ValueError(f"n_hard must be >= 1, got {self.n_hard}")
        if not self.tau_hard > 0:
            raise ValueError(f"tau_hard must be > 0, got {self.tau_hard}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.lambda_2d is None:
            lam = 0.0 if self.sigma <= LAMBDA_2D_SIGMA_CUTOFF else LAMBDA_2D_HIGH_SIGMA
            object.__setattr__(self, "lambda_2d", lam)


@dataclass(frozen=True)
class PatchStack:
    """A matched 3D group: the reference plus its nearest neighbors.

    ``members`` holds ((x, y), distance) pairs; the reference is always
    members[0] with distance 0 and the remainder are sorted by ascending
    distance with raster-order tie-breaking.
    """

    reference: tuple[int, int]
    members: tuple[tuple[tuple[int, int], float], ...]
    k: int

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("a patch stack holds at least the reference")
        if self.members[0][0] != self.reference or self.members[0][1] != 0.0:
            raise ValueError("members[0] must be the reference with distance 0")
        dists = [d for _, d in self.members]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise ValueError("member distances must be non-decreasing")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def positions(self) -> list[tuple[int, int]]:
        return [pos for pos, _ in self.members]


def hard_threshold(patch: Patch, lambda_2d: float, sigma: float) -> Patch:
    """Zero out values with magnitude below lambda_2d * sigma.

    With lambda_2d = 0 the output equals the input.
    """
    level = lambda_2d * sigma
    if level == 0.0:
        return patch
    values = np.where(np.abs(patch.values) < level, 0.0, patch.values)
    return Patch(origin=patch.origin, values=values)


def patch_distance(p: Patch, q: Patch, cfg: BlockMatchConfig) -> float:
    """Normalized quadratic distance between hard-thresholded patches."""
    if p.k != q.k:
        raise ValueError(f"patch sizes differ: {p.k} vs {q.k}")
    gp = hard_threshold(p, cfg.lambda_2d, cfg.sigma).values
    gq = hard_threshold(q, cfg.lambda_2d, cfg.sigma).values
    diff = gp - gq
    return float(np.sum(diff * diff) / (p.k * p.k))


def plan_references(width: int, height: int, cfg: BlockMatchConfig) -> list[tuple[int, int]]:
    """Reference origins on a stride grid, with the last row/column forced
    onto the image border so every pixel can be covered. Row-major order."""
    if width < cfg.k or height < cfg.k:
        raise ValueError(f"image {width}x{height} is smaller than patch size {cfg.k}")
    xs = _axis_positions(width, cfg.k, cfg.stride)
    ys = _axis_positions(height, cfg.k, cfg.stride)
    return [(x, y) for y in ys for x in xs]


def _axis_positions(extent: int, k: int, stride: int) -> list[int]:
    last = extent - k
    positions = list(range(0, last + 1, stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


def match_block(img: ImageBuffer, ref: tuple[int, int], cfg: BlockMatchConfig) -> PatchStack:
    """Build the 3D group for the reference origin ``ref``.

    Candidates are every valid patch origin within Chebyshev distance
    ``search_radius`` of the reference (window clipped at image borders).
    """
    rx, ry = int(ref[0]), int(ref[1])
    k = cfg.k
    if rx < 0 or ry < 0 or rx + k > img.width or ry + k > img.height:
        raise ValueError(f"reference {ref} is not a valid {k}x{k} patch origin "
                         f"in a {img.width}x{img.height} image")

    x0 = max(0, rx - cfg.search_radius)
    x1 = min(img.width - k, rx + cfg.search_radius)
    y0 = max(0, ry - cfg.search_radius)
    y1 = min(img.height - k, ry + cfg.search_radius)

    pixels = img.pixels
    level = cfg.lambda_2d * cfg.sigma
    if level > 0.0:
        pixels = np.where(np.abs(pixels) < level, 0.0, pixels)
    windows = sliding_window_view(pixels, (k, k))[y0:y1 + 1, x0:x1 + 1]
    ref_block = pixels[ry:ry + k, rx:rx + k]
    diff = windows - ref_block
    dist = np.einsum("yxij,yxij->yx", diff, diff) / (k * k)

    ys, xs = np.nonzero(dist <= cfg.tau_hard)
    dvals = dist[ys, xs]
    xs = xs + x0
    ys = ys + y0
    not_ref = (xs != rx) | (ys != ry)
    xs, ys, dvals = xs[not_ref], ys[not_ref], dvals[not_ref]

    order = np.lexsort((xs, ys, dvals))[: cfg.n_hard - 1]
    members = [((rx, ry), 0.0)]
    members += [((int(xs[i]), int(ys[i])), float(dvals[i])) for i in order]
    return PatchStack(reference=(rx, ry), members=tuple(members), k=k)


def stack_to_csv(stack: PatchStack) -> str:
    """Debug dump: one ``ref_x,ref_y,member_x,member_y,distance`` row per member."""
    rx, ry = stack.reference
    lines = [f"{rx},{ry},{x},{y},{d:.12g}" for (x, y), d in stack.members]
    return "\n".join(lines) + "\n"
