"""Shared fixtures: tiny rigs small enough for exhaustive enumeration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pomcrf.discriminative import GaussianModeBank
from pomcrf.geometry import Cylinder, build_projection_table, default_rig
from pomcrf.inference import all_states
from pomcrf.potentials import PotentialBundle, uniform_kernel
from pomcrf.scene_sim import OcclusionParams, oracle_observation_field, oracle_unary_scores, sample_occupancy

# 3-sigma boxes cover the unit square, so every assigned displacement lies in its mode's box
TINY_BANK = GaussianModeBank([[-0.25, -0.25], [0.25, -0.25], [-0.25, 0.25], [0.25, 0.25]],
                             [[0.085, 0.085]] * 4)


def tiny_rig(rows=3, cols=4, width=16, height=12, cameras=(0, 1), cell_size=0.5):
    grid, cams = default_rig(rows, cols, cell_size, width, height, standoff=3.0, elevation=2.5)
    cams = [cams[c] for c in cameras]
    cams = [type(c)(k, c.width, c.height, c.position, c.elevation, c.yaw, c.pitch, c.focal)
            for k, c in enumerate(cams)]
    return grid, cams, build_projection_table(grid, cams, Cylinder())


@dataclass
class TinyInstance:
    grid: object
    table: object
    Z: np.ndarray
    fields: list
    bundle: PotentialBundle
    bank: GaussianModeBank
    separated: bool


def tiny_instance(seed, people=None, noise=0.2, mu_h=0.3, mu_u=1.0, o=0.9, kernel=2.0):
    rng = np.random.default_rng(seed)
    grid, cams, table = tiny_rig()
    n = int(rng.integers(1, 3)) if people is None else people
    fr = sample_occupancy(grid, n, 2, rng)
    params = OcclusionParams(o)
    fields = [oracle_observation_field(fr.Z, table, c, params, TINY_BANK, noise, rng) for c in range(len(table))]
    unary = oracle_unary_scores(fr.Z, 0.2, rng)[None]
    bundle = PotentialBundle(mu_u=mu_u, mu_h=mu_h, kernel=uniform_kernel(kernel), o=o, unary=unary)
    xy = grid.cell_coords()[fr.occupied]
    sep = n < 2 or np.abs(xy[:, None] - xy[None]).sum(axis=2)[np.triu_indices(n, 1)].min() >= 3
    return TinyInstance(grid, table, fr.Z, fields, bundle, TINY_BANK, bool(sep))


def conditional_difference(energy, q):
    """E_Q[psi | Z_i = 1] - E_Q[psi | Z_i = 0] for every i, by enumeration."""
    Z = all_states(q.size)
    w = np.prod(np.where(Z, q, 1 - q), axis=1)
    e = energy(Z)
    on = (w * e) @ Z / q
    off = (w * e) @ ~Z / (1 - q)
    return on - off


def pattern_energy(Z, expl, table, bundle):
    """Pattern energy of every row of Z, evaluated pixel by pixel."""
    C, o = bundle.C, bundle.o
    Zf = Z.astype(float)
    e = np.zeros(Z.shape[0])
    for view, ce in zip(table.views, expl.cameras):
        for p in np.flatnonzero(ce.foreground):
            e -= C * np.all(~Z[:, ce.at(p)], axis=1)
        for p in np.flatnonzero(ce.background):
            L = view.cover_loc[view.cover_ptr[p]:view.cover_ptr[p + 1]]
            e -= C * (1 - np.prod(1 - o * Zf[:, L], axis=1))
    return e
