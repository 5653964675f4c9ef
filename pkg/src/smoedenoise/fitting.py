"""Per-patch parameter estimation for the mixture model.

The objective is a composite of mean squared error and a single-window
structural-similarity term, loss = lambda_mse * MSE + lambda_ssim *
(1 - SSIM). Gradients with respect to all raw kernel parameters are
analytic (chain rule through the gating normalization, the whitened
Mahalanobis form, and the SSIM rational form) and are checked against
finite differences in the test suite. Optimization is Adam with global
gradient-norm clipping and plateau-based learning-rate decay.

All member patches of a matched group are fitted together as a batch;
every array operation is row-independent, so a batched fit is bit-exact
with fitting each member alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .image import Patch
from .smoe import (CHOL_A, CHOL_B, CHOL_C, LOGIT, MU_X, MU_Y, WEIGHT,
                   Forward, SampleGrid, SmoeModel, forward_batch, init_params)

# Stabilizers of the SSIM terms on the [0, 1] intensity range.
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class FitDivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered while fitting."""

    def __init__(self, iteration: int | None = None):
        detail = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite loss or gradient{detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    """Loss weights, Adam hyperparameters, and scheduler settings.

    ``early_stop_tol`` is both the improvement threshold of the plateau
    scheduler and the early-stopping threshold; setting it to 0 disables
    early stopping while keeping the scheduler active.
    """

    lambda_mse: float = 0.5
    lambda_ssim: float = 0.5
    max_iters: int = 300
    lr0: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    early_stop_tol: float = 1e-7

    def __post_init__(self):
        if self.lambda_mse < 0 or self.lambda_ssim < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_mse + self.lambda_ssim <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.lr0 <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.min_lr > self.lr0:
            raise ValueError("min_lr must not exceed lr0")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.early_stop_tol < 0:
            raise ValueError("early_stop_tol must be >= 0")


@dataclass
class FitState:
    """Mutable optimizer bookkeeping for one fit."""

    lr: float
    iteration: int = 0
    best_loss: float = math.inf
    num_bad: int = 0        # scheduler stalls since the last lr cut or improvement
    num_stale: int = 0      # stalls since the last improvement (early stop)
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def _values(patch_or_array) -> np.ndarray:
    if isinstance(patch_or_array, Patch):
        return patch_or_array.values
    return np.asarray(patch_or_array, dtype=np.float64)


def ssim_block(a, b) -> float:
    """Single-window SSIM over two whole patches (population moments)."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"patch shapes differ: {va.shape} vs {vb.shape}")
    ma, mb = va.mean(), vb.mean()
    ac, bc = va - ma, vb - mb
    var_a = np.mean(ac * ac)
    var_b = np.mean(bc * bc)
    cov = np.mean(ac * bc)
    num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(num / den)


def _loss_and_residual(y: np.ndarray, t: np.ndarray, cfg: FitConfig
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Composite loss and its derivative w.r.t. each predicted value.

    ``y`` and ``t`` are (m, P) batches of flattened patches. Returns
    (loss (m,), residual (m, P)).
    """
    n = y.shape[1]
    diff = y - t
    mse = np.mean(diff * diff, axis=1)
    my = y.mean(axis=1)
    mt = t.mean(axis=1)
    yc = y - my[:, None]
    tc = t - mt[:, None]
    vy = np.mean(yc * yc, axis=1)
    vt = np.mean(tc * tc, axis=1)
    cyt = np.mean(yc * tc, axis=1)
    a1 = 2.0 * my * mt + SSIM_C1
    a2 = 2.0 * cyt + SSIM_C2
    b1 = my * my + mt * mt + SSIM_C1
    b2 = vy + vt + SSIM_C2
    ssim = (a1 * a2) / (b1 * b2)
    loss = cfg.lambda_mse * mse + cfg.lambda_ssim * (1.0 - ssim)

    coef = 2.0 / (n * b1 * b2)
    dssim = coef[:, None] * (mt[:, None] * a2[:, None] + a1[:, None] * tc
                             - ssim[:, None] * (my[:, None] * b2[:, None] + b1[:, None] * yc))
    residual = cfg.lambda_mse * (2.0 / n) * diff - cfg.lambda_ssim * dssim
    return loss, residual


def composite_loss(pred, target, cfg: FitConfig) -> float:
    """lambda_mse * MSE + lambda_ssim * (1 - SSIM) for one patch pair."""
    vp, vt = _values(pred), _values(target)
    if vp.shape != vt.shape:
        raise ValueError(f"patch shapes differ: {vp.shape} vs {vt.shape}")
    loss, _ = _loss_and_residual(vp.ravel()[None], vt.ravel()[None], cfg)
    return float(loss[0])


def _backward(fw: Forward, params: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the raw (m, K, 7) parameters.

    ``residual`` is dloss/dy from ``_loss_and_residual``. The gate gradient
    uses d y / d logphi_j = gate_j * (w_j - y), which already accounts for
    the softmax-style normalization (rows sum to zero over kernels).
    """
    r = residual[:, None, :]
    w = params[:, :, WEIGHT][:, :, None]
    h = r * fw.gates * (w - fw.y[:, None, :])
    hu = (h * fw.u).sum(axis=2)
    hv = (h * fw.v).sum(axis=2)
    grad = np.empty_like(params)
    grad[:, :, MU_X] = fw.ea[:, :, 0] * hu
    grad[:, :, MU_Y] = fw.b[:, :, 0] * hu + fw.ec[:, :, 0] * hv
    grad[:, :, CHOL_A] = -fw.ea[:, :, 0] * (h * fw.u * fw.dx).sum(axis=2)
    grad[:, :, CHOL_B] = -(h * fw.u * fw.dy).sum(axis=2)
    grad[:, :, CHOL_C] = -fw.ec[:, :, 0] * (h * fw.v * fw.dy).sum(axis=2)
    grad[:, :, WEIGHT] = (r * fw.gates).sum(axis=2)
    grad[:, :, LOGIT] = h.sum(axis=2)
    return grad


def loss_gradient(model: SmoeModel, target, grid: SampleGrid, cfg: FitConfig) -> np.ndarray:
    """Analytic gradient of the composite loss, flattened kernel-major.

    The returned vector has 7 entries per kernel in the order
    (mu_x, mu_y, a, b, c, w, prior_logit).
    """
    t = _values(target).ravel()
    params = model.to_params()[None]
    fw = forward_batch(params, grid.xs, grid.ys)
    _, residual = _loss_and_residual(fw.y, t[None], cfg)
    grad = _backward(fw, params, residual)[0]
    if not np.isfinite(grad).all():
        raise FitDivergenceError()
    return grad.ravel()


def clip_gradients(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale ``grad`` to global L2 norm ``clip_norm`` when it exceeds it."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm <= clip_norm:
        return grad
    return grad * (clip_norm / norm)


def _clip_batch(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.sqrt(np.sum(grad * grad, axis=(1, 2)))
    scale = np.ones_like(norms)
    over = norms > clip_norm
    scale[over] = clip_norm / norms[over]
    return grad * scale[:, None, None]


def scheduler_step(state: FitState, loss: float, cfg: FitConfig) -> float:
    """Plateau schedule: cut the learning rate after ``plateau_patience``
    iterations without an improvement beyond ``early_stop_tol``."""
    if loss < state.best_loss - cfg.early_stop_tol:
        state.best_loss = loss
        state.num_bad = 0
        state.num_stale = 0
    else:
        state.num_bad += 1
        state.num_stale += 1
        if state.num_bad >= cfg.plateau_patience:
            state.lr = max(state.lr * cfg.plateau_factor, cfg.min_lr)
            state.num_bad = 0
    return state.lr


@dataclass
class FitBatchResult:
    """Outcome of fitting a batch of member patches together.

    ``params`` holds the best-so-far raw parameters per member, ``losses``
    their composite losses (inf for failed members), ``failed_at`` the
    iteration of divergence or -1, and ``traces`` per-member
    (iteration, loss, lr, grad_norm) rows when tracing was requested.
    """

    params: np.ndarray
    losses: np.ndarray
    states: list = field(default_factory=list)
    failed_at: np.ndarray = None
    traces: list | None = None


def fit_patch_batch(targets: np.ndarray, n_kernels: int, cfg: FitConfig,
                    collect_trace: bool = False) -> FitBatchResult:
    """Fit one model per target patch, all batched over the member axis.

    ``targets`` is (m, k, k). Each member runs an independent Adam
    trajectory; members that stop early or diverge are frozen so the
    remaining trajectories are unaffected.
    """
    m_count, k = targets.shape[0], targets.shape[1]
    grid = SampleGrid(k)
    t_flat = targets.reshape(m_count, -1)
    params = np.stack([init_params(targets[i], n_kernels) for i in range(m_count)])
    states = [FitState(lr=cfg.lr0) for _ in range(m_count)]
    mom1 = np.zeros_like(params)
    mom2 = np.zeros_like(params)
    steps = np.zeros(m_count, dtype=np.int64)
    active = np.ones(m_count, dtype=bool)
    failed_at = np.full(m_count, -1, dtype=np.int64)
    best_params = params.copy()
    best_loss = np.full(m_count, np.inf)
    traces = [[] for _ in range(m_count)] if collect_trace else None

    for it in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        fw = forward_batch(params[idx], grid.xs, grid.ys)
        loss, residual = _loss_and_residual(fw.y, t_flat[idx], cfg)
        with np.errstate(invalid="ignore", over="ignore"):
            grad = _backward(fw, params[idx], residual)
        grad_norm = np.sqrt(np.sum(grad * grad, axis=(1, 2)))

        loss_ok = np.isfinite(loss)
        grad_ok = np.isfinite(grad).all(axis=(1, 2))

        update_positions = []
        for pos, member in enumerate(idx):
            if not loss_ok[pos]:
                failed_at[member] = it
                active[member] = False
                continue
            loss_val = float(loss[pos])
            if loss_val < best_loss[member]:
                best_loss[member] = loss_val
                best_params[member] = params[member]
            lr_now = scheduler_step(states[member], loss_val, cfg)
            states[member].iteration = it + 1
            if collect_trace:
                traces[member].append((it, loss_val, lr_now, float(grad_norm[pos])))
            if cfg.early_stop_tol > 0 and states[member].num_stale >= 2 * cfg.plateau_patience:
                active[member] = False
                continue
            if not grad_ok[pos]:
                failed_at[member] = it
                active[member] = False
                continue
            update_positions.append(pos)

        if not update_positions:
            continue
        rows = np.asarray(update_positions)
        sel = idx[rows]
        g = _clip_batch(grad[rows], cfg.clip_norm)
        steps[sel] += 1
        t_sel = steps[sel].astype(np.float64)
        lr_sel = np.array([states[member].lr for member in sel])
        mom1[sel] = cfg.adam_beta1 * mom1[sel] + (1.0 - cfg.adam_beta1) * g
        mom2[sel] = cfg.adam_beta2 * mom2[sel] + (1.0 - cfg.adam_beta2) * g * g
        mhat = mom1[sel] / (1.0 - cfg.adam_beta1 ** t_sel)[:, None, None]
        vhat = mom2[sel] / (1.0 - cfg.adam_beta2 ** t_sel)[:, None, None]
        params[sel] = params[sel] - lr_sel[:, None, None] * mhat / (np.sqrt(vhat) + cfg.adam_eps)

    # The last Adam update is never scored inside the loop; score it now.
    alive = np.flatnonzero(failed_at < 0)
    if alive.size:
        fw = forward_batch(params[alive], grid.xs, grid.ys)
        loss, _ = _loss_and_residual(fw.y, t_flat[alive], cfg)
        loss_ok = np.isfinite(loss)
        for pos, member in enumerate(alive):
            if loss_ok[pos] and float(loss[pos]) < best_loss[member]:
                best_loss[member] = float(loss[pos])
                best_params[member] = params[member]
    never_scored = (failed_at < 0) & ~np.isfinite(best_loss)
    failed_at[never_scored] = 0

    for member in range(m_count):
        states[member].m = mom1[member]
        states[member].v = mom2[member]
    return FitBatchResult(params=best_params, losses=best_loss, states=states,
                          failed_at=failed_at, traces=traces)


def fit_patch(patch: Patch, n_kernels: int = 4, cfg: FitConfig | None = None,
              seed: int = 0, trace: list | None = None) -> tuple[SmoeModel, float]:
    """Fit one model to one patch; returns the best-seen model and its loss.

    Fitting is deterministic given (patch, n_kernels, cfg); ``seed`` is part
    of the pipeline's per-group seed plumbing and does not perturb the
    estimate. Passing a list as ``trace`` collects (iteration, loss, lr,
    grad_norm) rows. Raises FitDivergenceError when the loss or gradient
    turns non-finite.
    """
    cfg = cfg if cfg is not None else FitConfig()
    result = fit_patch_batch(patch.values[None], n_kernels, cfg,
                             collect_trace=trace is not None)
    if result.failed_at[0] >= 0:
        raise FitDivergenceError(int(result.failed_at[0]))
    if trace is not None:
        trace.extend(result.traces[0])
    model = SmoeModel.from_params(result.params[0], k=patch.k)
    return model, float(result.losses[0])
