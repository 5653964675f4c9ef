"""Steered mixture-of-experts regression over patch coordinates.

A model is K two-dimensional Gaussian kernels. Each kernel carries a
center mu in [0,1]^2, a raw Cholesky triple (a, b, c) that defines the
inverse covariance (the steering matrix) as L L^T with
L = [[exp(a), 0], [b, exp(c)]], a constant expert level w, and a prior
logit. Gates are the prior-weighted kernel responses normalized to a
partition of unity; the decoded surface is the gate-weighted sum of the
expert levels.

The raw parameter layout used by fitting is a (K, 7) array with columns
(mu_x, mu_y, a, b, c, w, prior_logit); batches add a leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .image import Patch

# Raw parameter columns.
MU_X, MU_Y, CHOL_A, CHOL_B, CHOL_C, WEIGHT, LOGIT = range(7)
N_PARAMS = 7


@dataclass(frozen=True)
class Kernel2D:
    """One Gaussian expert: center, raw Cholesky triple, level, prior logit."""

    center: tuple[float, float]
    chol: tuple[float, float, float]
    weight: float
    prior_logit: float

    def inv_cov(self) -> np.ndarray:
        """The 2x2 inverse covariance L L^T; positive definite by construction."""
        a, b, c = self.chol
        low = np.array([[math.exp(a), 0.0], [b, math.exp(c)]])
        return low @ low.T


@dataclass(frozen=True)
class SmoeModel:
    """K kernels plus the patch size the model targets."""

    kernels: tuple[Kernel2D, ...]
    k: int

    def __post_init__(self):
        if len(self.kernels) < 1:
            raise ValueError("a model needs at least one kernel")
        if self.k < 1:
            raise ValueError(f"target patch size must be >= 1, got {self.k}")

    @property
    def n_kernels(self) -> int:
        return len(self.kernels)

    def priors(self) -> np.ndarray:
        """Softmax of the prior logits; positive and summing to 1."""
        logits = np.array([kern.prior_logit for kern in self.kernels])
        shifted = np.exp(logits - logits.max())
        return shifted / shifted.sum()

    def to_params(self) -> np.ndarray:
        params = np.empty((self.n_kernels, N_PARAMS))
        for i, kern in enumerate(self.kernels):
            params[i] = (kern.center[0], kern.center[1], *kern.chol,
                         kern.weight, kern.prior_logit)
        return params

    @classmethod
    def from_params(cls, params: np.ndarray, k: int) -> "SmoeModel":
        params = np.asarray(params, dtype=np.float64)
        kernels = tuple(
            Kernel2D(center=(float(row[MU_X]), float(row[MU_Y])),
                     chol=(float(row[CHOL_A]), float(row[CHOL_B]), float(row[CHOL_C])),
                     weight=float(row[WEIGHT]),
                     prior_logit=float(row[LOGIT]))
            for row in params)
        return cls(kernels=kernels, k=k)


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Pixel-center sample positions for a k-by-k patch.

    Pixel (column i, row j) maps to ((i + 0.5)/k, (j + 0.5)/k), strictly
    inside (0, 1). ``xs``/``ys`` are flattened row-major.
    """

    k: int
    xs: np.ndarray = None
    ys: np.ndarray = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"grid size must be >= 1, got {self.k}")
        centers = (np.arange(self.k) + 0.5) / self.k
        gx, gy = np.meshgrid(centers, centers)
        xs, ys = gx.ravel(), gy.ravel()
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)


class Forward(NamedTuple):
    """Intermediates of a batched model evaluation, kept for backprop."""

    dx: np.ndarray      # (m, K, P) offsets x - mu_x
    dy: np.ndarray      # (m, K, P)
    ea: np.ndarray      # (m, K, 1) exp(a)
    b: np.ndarray       # (m, K, 1)
    ec: np.ndarray      # (m, K, 1) exp(c)
    u: np.ndarray       # (m, K, P) first whitened coordinate
    v: np.ndarray       # (m, K, P) second whitened coordinate
    gates: np.ndarray   # (m, K, P) partition of unity over K
    y: np.ndarray       # (m, P) decoded values


def forward_batch(params: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> Forward:
    """Evaluate a (m, K, 7) parameter batch at P sample positions.

    Gates are computed in the log domain with a max shift, so a position
    where every prior-weighted kernel underflows still gets a one-hot gate
    on the kernel with the largest log response.
    """
    dx = xs[None, None, :] - params[:, :, MU_X][:, :, None]
    dy = ys[None, None, :] - params[:, :, MU_Y][:, :, None]
    with np.errstate(over="ignore"):
        ea = np.exp(params[:, :, CHOL_A])[:, :, None]
        ec = np.exp(params[:, :, CHOL_C])[:, :, None]
    b = params[:, :, CHOL_B][:, :, None]
    u = ea * dx + b * dy
    v = ec * dy
    logphi = params[:, :, LOGIT][:, :, None] - 0.5 * (u * u + v * v)
    shift = logphi.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        phi = np.exp(logphi - shift)
    underflow = ~np.isfinite(shift)
    if underflow.any():
        best = np.argmax(logphi, axis=1, keepdims=True)
        onehot = (np.arange(params.shape[1])[None, :, None] == best).astype(np.float64)
        phi = np.where(underflow, onehot, phi)
    gates = phi / phi.sum(axis=1, keepdims=True)
    y = (params[:, :, WEIGHT][:, :, None] * gates).sum(axis=1)
    return Forward(dx=dx, dy=dy, ea=ea, b=b, ec=ec, u=u, v=v, gates=gates, y=y)


def kernel_eval(kernel: Kernel2D, x: tuple[float, float]) -> float:
    """exp(-1/2 Mahalanobis^2) under the kernel's steering matrix; 1 iff x = mu."""
    dx = x[0] - kernel.center[0]
    dy = x[1] - kernel.center[1]
    a, b, c = kernel.chol
    u = math.exp(a) * dx + b * dy
    v = math.exp(c) * dy
    return math.exp(-0.5 * (u * u + v * v))


def gates_eval(model: SmoeModel, x: tuple[float, float]) -> np.ndarray:
    """Gate vector at one position: prior-weighted kernels, normalized to sum 1."""
    fw = forward_batch(model.to_params()[None],
                       np.array([float(x[0])]), np.array([float(x[1])]))
    return fw.gates[0, :, 0].copy()


def decode(model: SmoeModel, grid: SampleGrid) -> Patch:
    """Gate-weighted expert combination over the grid, as a patch at (0, 0).

    Values are intentionally not clamped to [0, 1]; the loss is computed on
    the raw surface and clamping happens at final image assembly.
    """
    fw = forward_batch(model.to_params()[None], grid.xs, grid.ys)
    return Patch(origin=(0, 0), values=fw.y[0].reshape(grid.k, grid.k))


def init_params(values: np.ndarray, n_kernels: int) -> np.ndarray:
    """Raw (K, 7) starting point for fitting a k-by-k patch.

    Centers sit on a near-square grid inside the unit square, bandwidths
    are isotropic at roughly one grid cell, expert levels copy the patch
    intensity under each center, and prior logits start uniform at 0.
    """
    if n_kernels < 1:
        raise ValueError(f"kernel count must be >= 1, got {n_kernels}")
    k = values.shape[0]
    g = math.isqrt(n_kernels)
    if g * g < n_kernels:
        g += 1
    bandwidth = math.log(2.0 * math.sqrt(n_kernels))
    params = np.zeros((n_kernels, N_PARAMS))
    for idx in range(n_kernels):
        j, i = divmod(idx, g)
        cx = (i + 0.5) / g
        cy = (j + 0.5) / g
        col = min(k - 1, int(cx * k))
        row = min(k - 1, int(cy * k))
        params[idx, MU_X] = cx
        params[idx, MU_Y] = cy
        params[idx, CHOL_A] = bandwidth
        params[idx, CHOL_C] = bandwidth
        params[idx, WEIGHT] = values[row, col]
    return params


def init_model(patch: Patch, n_kernels: int) -> SmoeModel:
    """Deterministic starting model for ``fit_patch``."""
    return SmoeModel.from_params(init_params(patch.values, n_kernels), k=patch.k)


def default_1d_samples() -> np.ndarray:
    """The demo sample grid: 0 to 1 inclusive in steps of 1e-4 (10001 points)."""
    return np.arange(10001) / 10000.0


def smoe_1d_components(centers: Sequence[float], precisions: Sequence[float],
                       weights: Sequence[float], samples: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kernels, gates, and regression curve of the 1D mixture.

    Returns (kernels (K, n), gates (K, n), y (n,)) with
    k_i = exp(-prec_i (x - mu_i)^2) and gates normalized per sample.
    """
    mu = np.asarray(centers, dtype=np.float64)
    prec = np.asarray(precisions, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not (mu.shape == prec.shape == w.shape) or mu.ndim != 1 or mu.size < 1:
        raise ValueError("centers, precisions, and weights must be equal-length 1D sequences")
    x = np.asarray(samples, dtype=np.float64)
    logk = -prec[:, None] * (x[None, :] - mu[:, None]) ** 2
    kernels = np.exp(logk)
    phi = np.exp(logk - logk.max(axis=0, keepdims=True))
    gates = phi / phi.sum(axis=0, keepdims=True)
    y = (w[:, None] * gates).sum(axis=0)
    return kernels, gates, y


def decode_1d(centers: Sequence[float], precisions: Sequence[float],
              weights: Sequence[float], samples: np.ndarray | None = None) -> np.ndarray:
    """Regression values of the 1D mixture on ``samples`` (demo grid by default)."""
    if samples is None:
        samples = default_1d_samples()
    return smoe_1d_components(centers, precisions, weights, samples)[2]


def serialize_model(model: SmoeModel) -> str:
    """One kernel per line: ``mu_x mu_y a b c w prior_logit`` (full precision)."""
    lines = []
    for kern in model.kernels:
        fields = (kern.center[0], kern.center[1], *kern.chol, kern.weight, kern.prior_logit)
        lines.append(" ".join(f"{f:.17g}" for f in fields))
    return "\n".join(lines) + "\n"


def parse_model(text: str, k: int = 8) -> SmoeModel:
    """Inverse of ``serialize_model``; ``k`` is the target patch size."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != N_PARAMS:
            raise ValueError(f"model line {lineno}: expected {N_PARAMS} fields, got {len(fields)}")
        rows.append([float(f) for f in fields])
    if not rows:
        raise ValueError("no kernel lines found")
    return SmoeModel.from_params(np.array(rows), k=k)
