"""Shared test utilities: independent oracles and fixture images."""

from __future__ import annotations

import numpy as np

from smoedenoise import BlockMatchConfig, FitConfig, ImageBuffer, SampleGrid, SmoeModel
from smoedenoise.fitting import composite_loss
from smoedenoise.smoe import decode


def write_pgm(path, width: int, height: int, raster: bytes, maxval: int = 255) -> None:
    """Write raw PGM bytes without going through the library's saver."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(raster)


def make_phantom(n: int = 128) -> ImageBuffer:
    """Piecewise-constant 0.2/0.5/0.8 with a vertical and one diagonal edge."""
    x, y = np.meshgrid(np.arange(n), np.arange(n))
    px = np.full((n, n), 0.2)
    right = x >= n // 2 - 16
    px[right] = np.where(y[right] < x[right], 0.5, 0.8)
    return ImageBuffer(px)


def random_model(rng: np.random.Generator, n_kernels: int, k: int = 8) -> SmoeModel:
    """A well-conditioned random model for gradient and gating checks."""
    params = np.column_stack([
        rng.uniform(0.05, 0.95, n_kernels),    # mu_x
        rng.uniform(0.05, 0.95, n_kernels),    # mu_y
        rng.uniform(-1.5, 1.5, n_kernels),     # a
        rng.uniform(-1.0, 1.0, n_kernels),     # b
        rng.uniform(-1.5, 1.5, n_kernels),     # c
        rng.uniform(0.0, 1.0, n_kernels),      # w
        rng.uniform(-1.0, 1.0, n_kernels),     # prior logit
    ])
    return SmoeModel.from_params(params, k=k)


def finite_diff_gradient(model: SmoeModel, target: np.ndarray, grid: SampleGrid,
                         cfg: FitConfig, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the composite loss over all raw parameters."""
    flat = model.to_params().ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        loss_up = composite_loss(
            decode(SmoeModel.from_params(up.reshape(-1, 7), model.k), grid).values, target, cfg)
        loss_down = composite_loss(
            decode(SmoeModel.from_params(down.reshape(-1, 7), model.k), grid).values, target, cfg)
        grad[i] = (loss_up - loss_down) / (2.0 * h)
    return grad


def brute_force_match(img: ImageBuffer, ref: tuple[int, int], cfg: BlockMatchConfig):
    """Exhaustive matching reference: enumerate the window, score each candidate
    directly, python-sort by (distance, y, x), truncate, reference first."""
    rx, ry = ref
    k = cfg.k
    level = cfg.lambda_2d * cfg.sigma

    def gamma(block: np.ndarray) -> np.ndarray:
        if level == 0.0:
            return block
        return np.where(np.abs(block) < level, 0.0, block)

    ref_block = gamma(img.pixels[ry:ry + k, rx:rx + k])
    candidates = []
    for y in range(max(0, ry - cfg.search_radius), min(img.height - k, ry + cfg.search_radius) + 1):
        for x in range(max(0, rx - cfg.search_radius), min(img.width - k, rx + cfg.search_radius) + 1):
            if (x, y) == (rx, ry):
                continue
            block = gamma(img.pixels[y:y + k, x:x + k])
            dist = float(np.sum((ref_block - block) ** 2)) / (k * k)
            if dist <= cfg.tau_hard:
                candidates.append(((x, y), dist))
    candidates.sort(key=lambda item: (item[1], item[0][1], item[0][0]))
    return [((rx, ry), 0.0)] + candidates[: cfg.n_hard - 1]
