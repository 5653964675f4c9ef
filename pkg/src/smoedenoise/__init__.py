"""Speckle denoising for grayscale images.

Pipeline: block matching groups similar patches, a steered
mixture-of-experts model is fitted to every member of each group by Adam
on a composite MSE+SSIM loss, the decoded models are fused, and the fused
estimates are aggregated back into the image. A speckle simulator and
full-reference quality metrics (PSNR, SSIM, GMSD) round out the toolkit.
"""

from .assessment import NoiseConfig, QualityReport, add_speckle, compare, gmsd, psnr, ssim_image
from .blockmatch import (BlockMatchConfig, PatchStack, hard_threshold, match_block,
                         patch_distance, plan_references, stack_to_csv)
from .fitting import (FitConfig, FitDivergenceError, FitState, clip_gradients,
                      composite_loss, fit_patch, fit_patch_batch, loss_gradient,
                      scheduler_step, ssim_block)
from .image import (Accumulator, ImageBuffer, ImageFormatError, Patch, extract_patch,
                    load_image, save_image)
from .pipeline import (DenoiseConfig, DenoiseStats, GroupFitError, denoise_group,
                       denoise_image, derive_group_seed)
from .smoe import (Kernel2D, SampleGrid, SmoeModel, decode, decode_1d, gates_eval,
                   init_model, kernel_eval, parse_model, serialize_model,
                   smoe_1d_components)

__version__ = "0.1.0"

__all__ = [
    "Accumulator", "BlockMatchConfig", "DenoiseConfig", "DenoiseStats", "FitConfig",
    "FitDivergenceError", "FitState", "GroupFitError", "ImageBuffer", "ImageFormatError",
    "Kernel2D", "NoiseConfig", "Patch", "PatchStack", "QualityReport", "SampleGrid",
    "SmoeModel", "add_speckle", "clip_gradients", "compare", "composite_loss", "decode",
    "decode_1d", "denoise_group", "denoise_image", "derive_group_seed", "extract_patch",
    "fit_patch", "fit_patch_batch", "gates_eval", "gmsd", "hard_threshold", "init_model",
    "kernel_eval", "load_image", "loss_gradient", "match_block", "parse_model",
    "patch_distance", "plan_references", "psnr", "save_image", "scheduler_step",
    "serialize_model", "smoe_1d_components", "ssim_block", "ssim_image", "stack_to_csv",
    "__version__",
]
