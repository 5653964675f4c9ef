"""Command-line front end.

Commands: denoise, simulate, evaluate, demo-1d, match-dump. Settings are
layered: built-in defaults, then a ``key = value`` config file (``#``
starts a comment, unknown keys are rejected), then command-line flags.
Machine-readable output is JSON or CSV on stdout / in files; diagnostics
go to stderr. Exit codes: 0 success, 1 I/O failure, 2 invalid
configuration or usage.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .assessment import NoiseConfig, add_speckle, compare, psnr
from .blockmatch import BlockMatchConfig, match_block, stack_to_csv
from .fitting import FitConfig
from .image import ImageFormatError, load_image, save_image
from .pipeline import DenoiseConfig, denoise_image
from .smoe import default_1d_samples, smoe_1d_components


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable value, or missing path."""


# Every key a config file may set; flags carry the same names.
_CONFIG_KEYS: dict[str, type] = {
    "input": str, "output": str,
    "k": int, "stride": int, "search_radius": int, "n_hard": int,
    "tau_hard": float, "match_sigma": float, "lambda_2d": float,
    "kernels": int, "fusion": str,
    "lambda_mse": float, "lambda_ssim": float, "max_iters": int, "lr0": float,
    "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "clip_norm": float, "plateau_patience": int, "plateau_factor": float,
    "min_lr": float, "early_stop_tol": float,
    "sigma": float, "seed": int, "workers": int,
}

_DEMO_CENTERS = "0.12,0.55,0.65"
_DEMO_WEIGHTS = "0.2,0.8,0.4"
_DEMO_PRECISION = 500.0


@dataclass
class RunConfig:
    denoise: DenoiseConfig
    sigma: float
    input: str | None
    output: str | None


def parse_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {value}") from exc
    return values


def _layered(args, file_cfg: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def build_run_config(args) -> RunConfig:
    file_cfg = parse_config_file(args.config) if args.config else {}
    bm_default = BlockMatchConfig()
    fit_default = FitConfig()
    get = lambda key, default: _layered(args, file_cfg, key, default)
    try:
        bm = BlockMatchConfig(
            k=get("k", bm_default.k),
            stride=get("stride", bm_default.stride),
            search_radius=get("search_radius", bm_default.search_radius),
            n_hard=get("n_hard", bm_default.n_hard),
            tau_hard=get("tau_hard", bm_default.tau_hard),
            sigma=get("match_sigma", bm_default.sigma),
            lambda_2d=get("lambda_2d", None),
        )
        fit = FitConfig(
            lambda_mse=get("lambda_mse", fit_default.lambda_mse),
            lambda_ssim=get("lambda_ssim", fit_default.lambda_ssim),
            max_iters=get("max_iters", fit_default.max_iters),
            lr0=get("lr0", fit_default.lr0),
            adam_beta1=get("adam_beta1", fit_default.adam_beta1),
            adam_beta2=get("adam_beta2", fit_default.adam_beta2),
            adam_eps=get("adam_eps", fit_default.adam_eps),
            clip_norm=get("clip_norm", fit_default.clip_norm),
            plateau_patience=get("plateau_patience", fit_default.plateau_patience),
            plateau_factor=get("plateau_factor", fit_default.plateau_factor),
            min_lr=get("min_lr", fit_default.min_lr),
            early_stop_tol=get("early_stop_tol", fit_default.early_stop_tol),
        )
        dn = DenoiseConfig(
            bm=bm, fit=fit,
            kernels=get("kernels", 4),
            fusion_mode=get("fusion", "average"),
            seed=get("seed", 0),
            workers=get("workers", os.cpu_count() or 1),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(denoise=dn, sigma=get("sigma", 0.0),
                     input=get("input", None), output=get("output", None))


def _require_input(path: str | None) -> str:
    if not path:
        raise ConfigError("no input path given (positional argument or 'input =' in config)")
    if not os.path.isfile(path):
        raise FileNotFoundError(2, "no such input file", path)
    return path


def _require_output(path: str | None) -> str:
    if not path:
        raise ConfigError("no output path given (positional argument or 'output =' in config)")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(2, "output directory does not exist", parent)
    return path


def _json_value(value: float):
    return "inf" if math.isinf(value) else value


def cmd_denoise(args) -> int:
    run = build_run_config(args)
    in_path = _require_input(run.input)
    out_path = _require_output(run.output)
    noisy = load_image(in_path)

    trace_rows = [] if args.trace else None
    hook = None
    if args.trace:
        def hook(ref, member, rows):
            trace_rows.extend((ref[0], ref[1], member, *row) for row in rows)

    denoised, stats = denoise_image(noisy, run.denoise, trace_hook=hook)
    save_image(denoised, out_path)
    Path(str(out_path) + ".stats.json").write_text(stats.to_json() + "\n", encoding="utf-8")
    if args.trace:
        lines = ["ref_x,ref_y,member,iter,loss,lr,grad_norm"]
        lines += [",".join(f"{v:.12g}" if isinstance(v, float) else str(v) for v in row)
                  for row in trace_rows]
        Path(str(out_path) + ".trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.plot:
        from .figures import render_comparison
        render_comparison([("input", noisy), ("denoised", denoised)], args.plot)
    print(stats.to_json())
    return 0


def cmd_simulate(args) -> int:
    run = build_run_config(args)
    in_path = _require_input(run.input)
    out_path = _require_output(run.output)
    sigma = run.sigma
    clean = load_image(in_path)
    noisy = add_speckle(clean, NoiseConfig(sigma=sigma, seed=run.denoise.seed))
    save_image(noisy, out_path)
    if args.plot:
        from .figures import render_comparison
        render_comparison([("clean", clean), (f"speckled (sigma={sigma:g})", noisy)], args.plot)
    print(json.dumps({"psnr": _json_value(psnr(noisy, clean))}))
    return 0


def cmd_evaluate(args) -> int:
    img_a = load_image(_require_input(args.image_a))
    img_b = load_image(_require_input(args.image_b))
    report = compare(img_a, img_b)
    if args.plot:
        from .figures import render_comparison
        caption = (f"psnr={_json_value(report.psnr)}  ssim={report.ssim:.4f}  "
                   f"gmsd={report.gmsd:.4f}")
        render_comparison([("a", img_a), ("b", img_b)], args.plot, caption=caption)
    print(report.to_json())
    return 0


def _parse_triple(text: str, name: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--{name} expects comma-separated numbers, got '{text}'") from exc
    if len(values) != 3:
        raise ConfigError(f"--{name} expects exactly 3 values, got {len(values)}")
    return values


def cmd_demo_1d(args) -> int:
    out_path = _require_output(args.output)
    centers = _parse_triple(args.centers, "centers")
    weights = _parse_triple(args.weights, "weights")
    x = default_1d_samples()
    kernels, gates, y = smoe_1d_components(centers, [args.precision] * 3, weights, x)
    lines = ["x,k1,k2,k3,g1,g2,g3,y"]
    for i in range(x.size):
        row = (x[i], kernels[0, i], kernels[1, i], kernels[2, i],
               gates[0, i], gates[1, i], gates[2, i], y[i])
        lines.append(",".join(f"{v:.12g}" for v in row))
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.plot:
        from .figures import render_demo_1d
        render_demo_1d(x, kernels, gates, y, args.plot)
    return 0


def cmd_match_dump(args) -> int:
    run = build_run_config(args)
    img = load_image(_require_input(args.input))
    stack = match_block(img, (args.ref_x, args.ref_y), run.denoise.bm)
    sys.stdout.write(stack_to_csv(stack))
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value config file")
    parser.add_argument("--trace", action="store_true",
                        help="write per-fit optimization traces (denoise)")
    parser.add_argument("--plot", metavar="PNG",
                        help="also render a figure to this file")
    group = parser.add_argument_group("pipeline settings (override config file)")
    for key, typ in _CONFIG_KEYS.items():
        if key in ("input", "output"):
            continue
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoedenoise",
        description="Speckle denoising via block-matched mixture-of-experts regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise", help="denoise an image")
    p.add_argument("input", nargs="?", help="noisy PGM/PNG image")
    p.add_argument("output", nargs="?", help="denoised image path")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_denoise)

    p = sub.add_parser("simulate", help="add synthetic speckle to a clean image")
    p.add_argument("input", nargs="?", help="clean PGM/PNG image")
    p.add_argument("output", nargs="?", help="speckled image path")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("evaluate", help="full-reference metrics between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("demo-1d", help="emit the 1D three-kernel regression demo as CSV")
    p.add_argument("output", help="CSV path")
    p.add_argument("--centers", default=_DEMO_CENTERS, help="three kernel centers")
    p.add_argument("--weights", default=_DEMO_WEIGHTS, help="three expert levels")
    p.add_argument("--precision", type=float, default=_DEMO_PRECISION,
                   help="shared kernel precision")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_demo_1d)

    p = sub.add_parser("match-dump", help="dump one reference's matched group as CSV")
    p.add_argument("input", help="PGM/PNG image")
    p.add_argument("ref_x", type=int)
    p.add_argument("ref_y", type=int)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_match_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ImageFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
