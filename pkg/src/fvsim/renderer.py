"""Forward Monte Carlo rendering of detector images.

Rays are split into fixed-size batches. Ray ``i`` of batch ``b`` draws all
of its random numbers from the stream keyed by ``(seed, b, i)``, each
batch fills a private integer detector buffer, and buffers are summed in
ascending batch order. The image therefore depends only on
``(seed, batch_size, n_rays)``, not on the number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math
import os
import time

import numpy as np

from . import tracer
from .geometry import SECONDARY_T_MIN, Ray
from .instrument import ConfigurationError, InstrumentConfig
from .rng import RngStream
from .scene.objects import Scene, pack_scene

OUTCOME_NAMES = {
    tracer.DETECTED: "detected",
    tracer.ABSORBED: "absorbed",
    tracer.LOST_APERTURE: "lost_aperture",
    tracer.ESCAPED: "escaped",
    tracer.TERMINATED_DEPTH: "terminated_depth",
    tracer.SPILLED: "spilled",
}


@dataclass
class RenderJob:
    instrument: InstrumentConfig
    scene: Scene
    n_rays: int
    global_seed: int = 0
    max_depth: int = 16
    batch_size: int = 100_000

    def __post_init__(self):
        if int(self.n_rays) < 1:
            raise ValueError("n_rays must be >= 1")
        if int(self.max_depth) < 1:
            raise ValueError("max_depth must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        self.n_rays = int(self.n_rays)
        self.max_depth = int(self.max_depth)
        self.batch_size = int(self.batch_size)

    @property
    def n_batches(self) -> int:
        return math.ceil(self.n_rays / self.batch_size)


@dataclass
class DetectorImage:
    width: int
    height: int
    counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != (self.height, self.width):
            raise ValueError(f"counts shape {self.counts.shape} != ({self.height}, {self.width})")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")


@dataclass
class RenderStats:
    rays_emitted: int = 0
    rays_detected: int = 0
    rays_terminated_depth: int = 0
    rays_lost_aperture: int = 0
    rays_absorbed: int = 0
    rays_escaped: int = 0
    rays_spilled: int = 0
    wall_time: float = 0.0
    rays_per_second: float = 0.0

    def census_balanced(self) -> bool:
        return self.rays_emitted == (self.rays_detected + self.rays_terminated_depth
                                     + self.rays_lost_aperture + self.rays_absorbed
                                     + self.rays_escaped + self.rays_spilled)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def pack_job(instrument: InstrumentConfig, scene: Scene) -> tracer.Packed:
    """Instrument primitives first, then the sample objects."""
    table = instrument.prim_table()
    pack_scene(scene, table)
    return table.pack()


def _validate(job: RenderJob) -> None:
    det = job.instrument.detector
    if det.accumulator.shape != (det.pixels_y, det.pixels_x):
        raise ConfigurationError("detector accumulator does not match its pixel grid")
    job.scene.validate()


def _sample_scene(job: RenderJob) -> Scene:
    """Scene moved by the instrument's stage position (µm along +z)."""
    z = job.instrument.sample_stage_z
    return job.scene if z == 0 else job.scene.translated((0.0, 0.0, z * 1e-3))


def render_image(job: RenderJob, workers: int | None = None) -> tuple[DetectorImage, RenderStats]:
    _validate(job)
    S = pack_job(job.instrument, _sample_scene(job))
    src = job.instrument.source.packed()
    det = job.instrument.detector
    shape = (det.pixels_y, det.pixels_x)
    seed = np.uint64(int(job.global_seed) & (2 ** 64 - 1))
    n_batches = job.n_batches
    workers = max(1, int(workers or 1))

    def run(b: int):
        n = min(job.batch_size, job.n_rays - b * job.batch_size)
        counts = np.zeros(shape, np.int64)
        census = np.zeros(tracer.N_OUTCOMES, np.int64)
        tracer.render_batch(S, src, seed, np.uint64(b), n, job.max_depth, counts, census,
                            tracer.new_stack())
        return counts, census

    t0 = time.perf_counter()
    total = np.zeros(shape, np.int64)
    census = np.zeros(tracer.N_OUTCOMES, np.int64)
    if workers == 1:
        results = map(run, range(n_batches))
        for c, k in results:
            total += c
            census += k
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order: the merge is ordered by batch index
            for c, k in pool.map(run, range(n_batches)):
                total += c
                census += k
    wall = time.perf_counter() - t0

    stats = RenderStats(
        rays_emitted=job.n_rays,
        rays_detected=int(census[tracer.DETECTED]),
        rays_terminated_depth=int(census[tracer.TERMINATED_DEPTH]),
        rays_lost_aperture=int(census[tracer.LOST_APERTURE]),
        rays_absorbed=int(census[tracer.ABSORBED]),
        rays_escaped=int(census[tracer.ESCAPED]),
        rays_spilled=int(census[tracer.SPILLED]),
        wall_time=wall,
        rays_per_second=job.n_rays / wall if wall > 0 else float("inf"),
    )
    if not stats.census_balanced():
        raise RuntimeError(f"ray census does not balance: {stats}")
    meta = dict(n_rays=job.n_rays, seed=int(job.global_seed), batch_size=job.batch_size,
                max_depth=job.max_depth, sample_stage_z=job.instrument.sample_stage_z,
                wall_time=wall)
    image = DetectorImage(det.pixels_x, det.pixels_y, total.astype(np.float64), meta)
    return image, stats


@dataclass
class PathResult:
    outcome: str
    pixel: tuple[int, int] | None
    depth: int


def trace_path(ray: Ray, scene: Scene, instrument: InstrumentConfig, rng: RngStream,
               max_depth: int = 16) -> PathResult:
    """Trace one ray through instrument and sample until it ends."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    S = pack_job(instrument, scene)
    o, d = ray.origin, ray.direction
    tmin = max(ray.t_min, SECONDARY_T_MIN) if ray.depth > 0 else ray.t_min
    out, i, j, depth, counter = tracer.trace_k(S, o[0], o[1], o[2], d[0], d[1], d[2], tmin,
                                              ray.depth, max_depth, rng.key, rng.counter,
                                              tracer.new_stack())
    rng.counter = int(counter)
    pixel = (int(i), int(j)) if out == tracer.DETECTED else None
    return PathResult(OUTCOME_NAMES[int(out)], pixel, int(depth))


@dataclass
class NoiseSummary:
    mean: np.ndarray
    relative_std: np.ndarray
    summary: float
    n_pixels: int


def estimate_noise(images: list[DetectorImage], threshold: float = 0.1) -> NoiseSummary:
    """Per-pixel relative standard deviation across independently seeded images.

    ``summary`` averages the relative std over pixels whose mean exceeds
    ``threshold`` times the brightest mean pixel.
    """
    if len(images) < 2:
        raise ValueError("noise estimation needs at least two images")
    shape = images[0].counts.shape
    if any(im.counts.shape != shape for im in images):
        raise ValueError("images differ in dimensions")
    stack = np.stack([im.counts for im in images])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0, ddof=1)
    rel = np.divide(std, mean, out=np.zeros_like(mean), where=mean > 0)
    peak = mean.max()
    if peak <= 0:
        raise ValueError("images contain no counts")
    sel = mean > threshold * peak
    return NoiseSummary(mean, rel, float(rel[sel].mean()), int(sel.sum()))
