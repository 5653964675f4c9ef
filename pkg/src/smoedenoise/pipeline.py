"""End-to-end denoising: match, fit per member, fuse, aggregate.

Every planned reference yields a matched group; one model is fitted per
member patch and the decoded models are fused into a single estimate
(plain mean, or weights proportional to inverse final loss). The fused
patch is written back at every member position with weight 1 and the
overlap accumulator resolves the final image, falling back to the noisy
input wherever nothing was written.

Groups are independent work units. With workers > 1 they run in a process
pool, but contributions are always merged in planning order, so the output
is bit-identical for any worker count.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blockmatch import BlockMatchConfig, PatchStack, match_block, plan_references
from .fitting import FitConfig, fit_patch_batch
from .image import Accumulator, ImageBuffer, Patch
from .smoe import SampleGrid, forward_batch

FUSION_MODES = ("average", "loss-weighted")

# Weight regularizer for loss-weighted fusion.
LOSS_FUSION_EPS = 1e-6


class GroupFitError(RuntimeError):
    """Every member fit of one group diverged."""

    def __init__(self, reference: tuple[int, int]):
        super().__init__(f"every member fit failed for reference {reference}")
        self.reference = reference

    def __reduce__(self):
        return (GroupFitError, (self.reference,))


@dataclass(frozen=True)
class DenoiseConfig:
    """Composed pipeline settings; see BlockMatchConfig and FitConfig."""

    bm: BlockMatchConfig = field(default_factory=BlockMatchConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    kernels: int = 4
    fusion_mode: str = "average"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.kernels < 1:
            raise ValueError(f"kernels must be >= 1, got {self.kernels}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, "
                             f"got '{self.fusion_mode}'")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass
class DenoiseStats:
    """Counters and coarse timing for one denoising run."""

    groups: int = 0
    patches: int = 0
    mean_loss: float = 0.0
    encode_s: float = 0.0
    decode_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"groups": self.groups, "patches": self.patches,
                           "mean_loss": self.mean_loss, "encode_s": self.encode_s,
                           "decode_s": self.decode_s})


@dataclass
class GroupResult:
    """One processed group, ready for ordered aggregation."""

    reference: tuple[int, int]
    positions: list
    losses: list             # per member, None where the fit was dropped
    fused: np.ndarray        # (k, k) fused estimate
    group_seed: int
    encode_s: float
    decode_s: float
    traces: list | None


def derive_group_seed(seed: int, ref_x: int, ref_y: int) -> int:
    """Stable per-group seed so the parallel schedule cannot leak into results."""
    return (seed * 1_000_003 + ref_x * 8_191 + ref_y * 131_071) % (2 ** 32)


def denoise_group(img: ImageBuffer, stack: PatchStack, cfg: DenoiseConfig,
                  collect_trace: bool = False) -> tuple[Patch, list]:
    """Fit every member of ``stack`` and fuse the decoded models.

    Returns the fused patch (anchored at the reference origin) and the
    per-member final losses, aligned with ``stack.members``; dropped
    members appear as None. Raises GroupFitError if no member survives.
    """
    fused, losses, _, _, _ = _fuse_stack(img, stack, cfg, collect_trace)
    return Patch(origin=stack.reference, values=fused), losses


def _fuse_stack(img: ImageBuffer, stack: PatchStack, cfg: DenoiseConfig,
                collect_trace: bool = False):
    k = stack.k
    px = img.pixels
    targets = np.stack([px[y:y + k, x:x + k] for (x, y) in stack.positions])

    t0 = time.perf_counter()
    fit = fit_patch_batch(targets, cfg.kernels, cfg.fit, collect_trace=collect_trace)
    encode_s = time.perf_counter() - t0

    ok = fit.failed_at < 0
    if not ok.any():
        raise GroupFitError(stack.reference)

    t1 = time.perf_counter()
    grid = SampleGrid(k)
    decoded = forward_batch(fit.params[ok], grid.xs, grid.ys).y
    if cfg.fusion_mode == "average":
        weights = np.full(decoded.shape[0], 1.0 / decoded.shape[0])
    else:
        inv = 1.0 / (fit.losses[ok] + LOSS_FUSION_EPS)
        weights = inv / inv.sum()
    fused = (weights[:, None] * decoded).sum(axis=0).reshape(k, k)
    decode_s = time.perf_counter() - t1

    losses = [float(l) if good else None for l, good in zip(fit.losses, ok)]
    traces = None
    if collect_trace:
        traces = [(i, rows) for i, rows in enumerate(fit.traces) if ok[i]]
    return fused, losses, encode_s, decode_s, traces


def _run_group(img: ImageBuffer, ref: tuple[int, int], cfg: DenoiseConfig,
               collect_trace: bool = False) -> GroupResult:
    stack = match_block(img, ref, cfg.bm)
    group_seed = derive_group_seed(cfg.seed, ref[0], ref[1])
    fused, losses, encode_s, decode_s, traces = _fuse_stack(img, stack, cfg, collect_trace)
    return GroupResult(reference=ref, positions=stack.positions, losses=losses,
                       fused=fused, group_seed=group_seed,
                       encode_s=encode_s, decode_s=decode_s, traces=traces)


_POOL_STATE = None


def _pool_init(img, cfg, refs, collect_trace):
    global _POOL_STATE
    _POOL_STATE = (img, cfg, refs, collect_trace)


def _pool_task(index: int) -> GroupResult:
    img, cfg, refs, collect_trace = _POOL_STATE
    return _run_group(img, refs[index], cfg, collect_trace)


def denoise_image(noisy: ImageBuffer, cfg: DenoiseConfig,
                  trace_hook=None) -> tuple[ImageBuffer, DenoiseStats]:
    """Denoise a full image; deterministic for a fixed config and seed.

    ``trace_hook(reference, member_index, rows)``, when given, receives the
    per-fit optimization trace of every surviving member.
    """
    refs = plan_references(noisy.width, noisy.height, cfg.bm)
    collect_trace = trace_hook is not None

    if cfg.workers > 1:
        executor = ProcessPoolExecutor(max_workers=cfg.workers, initializer=_pool_init,
                                       initargs=(noisy, cfg, refs, collect_trace))
        chunk = max(1, len(refs) // (cfg.workers * 8))
        results = executor.map(_pool_task, range(len(refs)), chunksize=chunk)
    else:
        executor = None
        results = (_run_group(noisy, ref, cfg, collect_trace) for ref in refs)

    stats = DenoiseStats()
    acc = Accumulator(noisy.width, noisy.height)
    loss_total = 0.0
    try:
        for res in results:
            stats.groups += 1
            stats.encode_s += res.encode_s
            stats.decode_s += res.decode_s
            t0 = time.perf_counter()
            for pos, loss in zip(res.positions, res.losses):
                if loss is None:
                    continue
                acc.accumulate(Patch(origin=pos, values=res.fused), 1.0)
                stats.patches += 1
                loss_total += loss
            stats.decode_s += time.perf_counter() - t0
            if collect_trace and res.traces:
                for member_index, rows in res.traces:
                    trace_hook(res.reference, member_index, rows)
    finally:
        if executor is not None:
            executor.shutdown()

    stats.mean_loss = loss_total / stats.patches if stats.patches else 0.0
    return acc.finalize(noisy), stats
