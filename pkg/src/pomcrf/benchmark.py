"""Synthetic benchmark: rig, fitted mode bank and noisy evidence per frame.

Everything is a deterministic function of a :class:`BenchmarkConfig` and a
seed.  Random streams are spawned per (purpose, frame, camera) so a frame can
be regenerated on its own, in any order and on any worker.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields as dc_fields

import numpy as np

from .discriminative import GaussianModeBank
from .geometry import Cylinder, GroundGrid, ProjectionTable, build_projection_table, default_rig
from .potentials import PotentialBundle, uniform_kernel
from .scene_sim import (OcclusionParams, SceneFrame, oracle_observation_field, oracle_unary_scores,
                        sample_occupancy, sample_sequence)
from .training import LabeledFrame, collect_displacement_samples, fit_mode_bank

# stream tags for SeedSequence spawning
_OCCUPANCY, _FIELD, _UNARY, _BANK, _SEQUENCE = 11, 12, 13, 14, 15


@dataclass
class BenchmarkConfig:
    rows: int = 20
    cols: int = 20
    cell_size: float = 0.25
    width: int = 64
    height: int = 48
    focal: float | None = None
    elevation: float = 2.0
    standoff: float = 6.0
    person_height: float = 1.75
    person_width: float = 0.5
    people_min: int = 10
    people_max: int = 15
    min_sep: int = 2
    o: float = 0.9
    field_noise: float = 0.2
    unary_noise: float = 0.2
    modes: int = 8
    bank_frames: int = 20
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass
class Benchmark:
    cfg: BenchmarkConfig
    grid: GroundGrid
    cameras: list
    table: ProjectionTable
    bank: GaussianModeBank
    params: OcclusionParams = field(init=False)

    def __post_init__(self):
        self.params = OcclusionParams(self.cfg.o)

    def occupancy(self, t: int, seed: int | None = None) -> SceneFrame:
        seed = self.cfg.seed if seed is None else seed
        rng = stream(seed, _OCCUPANCY, t)
        n = int(rng.integers(self.cfg.people_min, self.cfg.people_max + 1))
        fr = sample_occupancy(self.grid, n, self.cfg.min_sep, rng, t)
        fr.seed = seed
        return fr

    def fields(self, Z, t: int, bank: GaussianModeBank | None = None, seed: int | None = None):
        seed = self.cfg.seed if seed is None else seed
        bank = self.bank if bank is None else bank
        return [oracle_observation_field(Z, self.table, c, self.params, bank, self.cfg.field_noise,
                                         stream(seed, _FIELD, t, c))
                for c in range(len(self.table))]

    def unary(self, Z, t: int, seed: int | None = None) -> np.ndarray:
        seed = self.cfg.seed if seed is None else seed
        return oracle_unary_scores(Z, self.cfg.unary_noise, stream(seed, _UNARY, t))[None]

    def labeled_frame(self, t: int, seed: int | None = None) -> LabeledFrame:
        fr = self.occupancy(t, seed)
        return LabeledFrame(self.fields(fr.Z, t, seed=seed), self.unary(fr.Z, t, seed), fr.Z)

    def labeled_frames(self, n: int, seed: int | None = None, start: int = 0):
        return [self.labeled_frame(t, seed) for t in range(start, start + n)]

    def sequence(self, frames: int, seed: int | None = None):
        seed = self.cfg.seed if seed is None else seed
        rng = stream(seed, _SEQUENCE)
        n = int(rng.integers(self.cfg.people_min, self.cfg.people_max + 1))
        return sample_sequence(self.grid, n, frames, self.cfg.min_sep, rng)


def build_rig(cfg: BenchmarkConfig):
    grid, cams = default_rig(cfg.rows, cfg.cols, cfg.cell_size, cfg.width, cfg.height, cfg.focal,
                             cfg.elevation, cfg.standoff)
    table = build_projection_table(grid, cams, Cylinder(cfg.person_height, cfg.person_width))
    return grid, cams, table


def fit_benchmark_bank(cfg: BenchmarkConfig, grid, table) -> GaussianModeBank:
    """Mode bank fitted on exactly computed displacements of held-aside scenes."""
    params = OcclusionParams(cfg.o)
    occ = []
    for t in range(cfg.bank_frames):
        rng = stream(cfg.seed, _BANK, t)
        n = int(rng.integers(cfg.people_min, cfg.people_max + 1))
        occ.append(sample_occupancy(grid, n, cfg.min_sep, rng, t).Z)
    samples = collect_displacement_samples(occ, table, params, mode="exact")
    bank, _ = fit_mode_bank(samples, cfg.modes, rng=stream(cfg.seed, _BANK, 2**31 - 1))
    return bank


def make_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), bank: GaussianModeBank | None = None) -> Benchmark:
    grid, cams, table = build_rig(cfg)
    if bank is None:
        bank = fit_benchmark_bank(cfg, grid, table)
    return Benchmark(cfg, grid, cams, table, bank)


def default_bundle(cfg: BenchmarkConfig, mu_u: float, mu_h: float, kernel_value: float = 10.0,
                   kernel_radius: int = 1) -> PotentialBundle:
    return PotentialBundle(mu_u=mu_u, mu_h=mu_h, kernel=uniform_kernel(kernel_value, kernel_radius), o=cfg.o)
