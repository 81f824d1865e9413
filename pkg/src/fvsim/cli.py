"""Command-line harness: ``fvsim {render,sweep,measure,psf,validate} --config run.yaml``.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
import logging
from pathlib import Path
import sys

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .config import (RunConfig, build_instrument, build_scan, build_scene, load_config)
from .instrument import ConfigurationError
from .io import provenance, read_image, write_image, write_json
from .psf import apply_psf
from .renderer import RenderJob, estimate_noise, render_image
from .scanning import (acquire_stack, compare_topography, reconstruct_topography,
                       topography_pitch, write_stack)
from .scene.surfaces import ParameterError, write_heightfield

log = logging.getLogger("fvsim")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


@dataclass
class Run:
    """A validated configuration plus the command-line overrides."""
    config: RunConfig
    out: Path
    threads: int | None

    @property
    def seed(self) -> int:
        return self.config.render.seed

    def provenance(self, seed: int | None = None) -> dict:
        return provenance(self.config.model_dump(mode="json"), self.seed if seed is None else seed)


def _job(run: Run, instrument, scene, n_rays: int, seed: int) -> RenderJob:
    r = run.config.render
    return RenderJob(instrument, scene, n_rays, seed, r.max_depth, r.batch_size)


def run_single_image(run: Run) -> dict:
    cfg = run.config
    instrument = build_instrument(cfg.instrument)
    scene, _ = build_scene(cfg.scene)
    image, stats = render_image(_job(run, instrument, scene, cfg.render.n_rays, run.seed), run.threads)
    prov = run.provenance()
    write_image(run.out / "image.png", image, prov)
    report = {"stats": stats.as_dict(), "census_balanced": stats.census_balanced(), "provenance": prov}
    write_json(run.out / "stats.json", report)
    log.info("rendered %d rays: %d detected, %.3g rays/s", stats.rays_emitted, stats.rays_detected,
             stats.rays_per_second)
    return report


def run_sweep(run: Run) -> dict:
    """One image per (N_Rays, g) cell plus a per-cell noise estimate over repeated seeds."""
    cfg = run.config
    if cfg.sweep is None:
        raise ConfigurationError("sweep: section required for sweep mode")
    instrument = build_instrument(cfg.instrument)
    cells, warnings = [], []
    for g in cfg.sweep.g:
        scene, _ = build_scene(cfg.scene, g_override=g)
        noise_by_n = []
        for n in cfg.sweep.n_rays:
            cell = {"g": g, "n_rays": n}
            try:
                images = []
                for k in range(cfg.sweep.seeds):
                    image, stats = render_image(_job(run, instrument, scene, n, run.seed + k), run.threads)
                    images.append(image)
                    if k == 0:
                        path = run.out / f"g{g:g}_n{n}.png"
                        write_image(path, image, run.provenance(run.seed))
                        cell.update(image=path.name, stats=stats.as_dict())
                noise = estimate_noise(images)
                cell["noise"] = noise.summary
                noise_by_n.append((n, noise.summary))
            except Exception as exc:  # a failed cell is recorded, the sweep continues
                cell["error"] = f"{type(exc).__name__}: {exc}"
                log.error("sweep cell g=%g n=%d failed: %s", g, n, exc)
            cells.append(cell)
        ordered = [v for _, v in sorted(noise_by_n)]
        monotone = all(a > b for a, b in zip(ordered, ordered[1:]))
        if not monotone:
            msg = f"noise does not decrease monotonically with N_Rays for g={g}: {ordered}"
            warnings.append(msg)
            log.warning(msg)
    report = {"cells": cells, "warnings": warnings, "provenance": run.provenance()}
    write_json(run.out / "sweep_report.json", report)
    return report


def run_measurement(run: Run) -> dict:
    cfg = run.config
    if cfg.scan is None:
        raise ConfigurationError("scan: section required for measurement mode")
    instrument = build_instrument(cfg.instrument)
    scene, reference = build_scene(cfg.scene)
    scan = build_scan(cfg.scan, cfg.render)

    def progress(k, z, st):
        log.info("image %d/%d at z=%.4f µm: %d detected", k + 1, scan.n_images, z, st.rays_detected)

    stack = acquire_stack(instrument, scene, scan, run.threads, progress)
    prov = run.provenance()
    write_stack(stack, run.out / "stack", prov)
    topo = reconstruct_topography(stack, cfg.scan.window, cfg.scan.prominence,
                                  topography_pitch(instrument))
    write_heightfield(topo.to_heightfield(), run.out / "topography.txt")
    np.savetxt(run.out / "valid_mask.txt", topo.valid.astype(int), fmt="%d")
    report = {"n_images": len(stack), "valid_fraction": float(topo.valid.mean()),
              "median_height": float(np.nanmedian(topo.heights)) if topo.valid.any() else None,
              "provenance": prov}
    if reference is None:
        report["comparison"] = None
        report["notice"] = "no reference heightfield in the scene; comparison skipped"
        log.warning(report["notice"])
    else:
        cmp = compare_topography(topo, reference)
        row = topo.shape[0] // 2
        measured, ref = cmp.profile(row=row)
        np.savetxt(run.out / "profile.txt", np.column_stack([topo.x_coords(), measured, ref]),
                   header=f"row {row}: x_um measured_um reference_um")
        report["comparison"] = {"rms_deviation": cmp.rms_deviation, "max_deviation": cmp.max_deviation,
                                "piston": cmp.piston, "n_valid": cmp.n_valid, "profile_row": row}
    write_json(run.out / "measurement_report.json", report)
    return report


def run_psf(run: Run, image_path: str | None = None) -> dict:
    spec = run.config.psf
    if spec is None:
        raise ConfigurationError("psf: section required for psf mode")
    source = image_path or spec.input
    if source is None:
        raise ConfigurationError("psf: no input image (set psf.input or pass --image)")
    if not Path(source).exists():
        raise ConfigurationError(f"psf: input image not found: {source}")
    image = read_image(source)
    out = apply_psf(image, sigma=spec.sigma, kernel=spec.kernel_file)
    path = run.out / (Path(source).stem + "_psf.png")
    write_image(path, out, run.provenance(), extra={"source": str(source)})
    return {"output": str(path), "sum_in": float(image.counts.sum()), "sum_out": float(out.counts.sum())}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fvsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fvsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"render": "render a single detector image",
             "sweep": "factorial sweep over ray counts and g values",
             "measure": "acquire a focus stack and reconstruct the topography",
             "psf": "convolve an image with a point spread function",
             "validate": "check a configuration file and exit"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override render.seed")
        p.add_argument("--threads", type=int, help="worker threads (default: render.threads or 1)")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "psf":
            p.add_argument("--image", help="input image (overrides psf.input)")
    return parser


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.render.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        if args.command == "sweep" and cfg.sweep is None:
            raise ConfigurationError("sweep: section required for sweep mode")
        if args.command == "measure" and cfg.scan is None:
            raise ConfigurationError("scan: section required for measurement mode")
        if args.command == "psf" and cfg.psf is None:
            raise ConfigurationError("psf: section required for psf mode")
        # solve the optics and build the scene now so bad parameters count as validation errors
        build_instrument(cfg.instrument)
        build_scene(cfg.scene)
    except ValidationError as exc:
        print(_format_validation(exc), file=sys.stderr)
        return EXIT_INVALID
    except (ConfigurationError, ParameterError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID

    if args.command == "validate":
        print(f"{args.config}: ok")
        return EXIT_OK

    run = Run(cfg, Path(args.out or cfg.output_dir), args.threads or cfg.render.threads)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        if args.command == "render":
            run_single_image(run)
        elif args.command == "sweep":
            run_sweep(run)
        elif args.command == "measure":
            run_measurement(run)
        elif args.command == "psf":
            run_psf(run, args.image)
    except ConfigurationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
