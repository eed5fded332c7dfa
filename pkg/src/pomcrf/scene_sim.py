"""Synthetic ground truth and the occlusion-aware generative observation model.

Also provides oracle observation fields and unary scores that stand in for
trained detectors: they are derived from the true occupancy and corrupted
with a controllable amount of noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discriminative import GaussianModeBank, ObservationField
from .geometry import CameraView, GroundGrid, ProjectionTable

SCORE_FLOOR = 1e-4
# std of the occupied-score perturbation, in units of the noise level
UNARY_SPREAD = 2.5


class InfeasibleScene(RuntimeError):
    pass


@dataclass
class SceneFrame:
    Z: np.ndarray
    t: int = 0
    seed: int | None = None

    @property
    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.Z)


@dataclass(frozen=True)
class OcclusionParams:
    o: float = 0.9

    def __post_init__(self):
        if not 0 < self.o <= 1:
            raise ValueError(f"visibility expectancy must lie in (0, 1], got {self.o}")


def _separated(cells: np.ndarray, min_sep: int) -> bool:
    if len(cells) < 2 or min_sep <= 0:
        return True
    d = np.abs(cells[:, None, :] - cells[None, :, :]).sum(axis=2)
    iu = np.triu_indices(len(cells), 1)
    return bool(np.all(d[iu] >= min_sep))


def sample_occupancy(grid: GroundGrid, count: int, min_sep: int, rng: np.random.Generator,
                     t: int = 0, max_rounds: int = 20000) -> SceneFrame:
    """Exactly ``count`` occupied cells, pairwise L1 distance >= ``min_sep``.

    Plain rejection sampling, so placements are uniform over feasible ones.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > grid.N:
        raise InfeasibleScene(f"{count} people do not fit in {grid.N} cells")
    coords = grid.cell_coords()
    for _ in range(max_rounds):
        idx = rng.choice(grid.N, size=count, replace=False)
        if _separated(coords[idx], min_sep):
            Z = np.zeros(grid.N, dtype=bool)
            Z[idx] = True
            return SceneFrame(Z, t)
    raise InfeasibleScene(f"no placement of {count} people with min_sep={min_sep} "
                          f"after {max_rounds} rounds")


def sample_sequence(grid: GroundGrid, count: int, frames: int, min_sep: int,
                    rng: np.random.Generator, stay: float = 0.3):
    """Random walk of ``count`` people over ``frames`` frames.

    Each person moves to one of the 8 neighbouring cells (or stays, with
    probability ``stay``) provided the move keeps the separation constraint.
    Returns the frames and an (frames, count) array of location indices.
    """
    first = sample_occupancy(grid, count, min_sep, rng)
    pos = grid.cell_coords()[first.occupied].copy()
    steps = np.array([(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)])
    tracks = np.zeros((frames, count), dtype=np.int64)
    out = []
    for t in range(frames):
        if t > 0:
            for p in rng.permutation(count):
                if rng.random() < stay:
                    continue
                cand = pos[p] + steps[rng.integers(len(steps))]
                if not (0 <= cand[0] < grid.cols and 0 <= cand[1] < grid.rows):
                    continue
                trial = pos.copy()
                trial[p] = cand
                if _separated(trial, min_sep):
                    pos = trial
        idx = pos[:, 1] * grid.cols + pos[:, 0]
        tracks[t] = idx
        Z = np.zeros(grid.N, dtype=bool)
        Z[idx] = True
        out.append(SceneFrame(Z, t))
    return out, tracks


def _view(table, cam) -> CameraView:
    return table[cam] if isinstance(table, ProjectionTable) else table


def render_observation_sample(Z, table, cam, params: OcclusionParams, rng: np.random.Generator):
    """One draw of the generative model in camera ``cam``.

    Each occupied in-view location is visible in this camera with probability
    ``o`` (one draw shared by all of its pixels).  Walking each line of sight
    near to far, the first visible occupied location claims the pixel.

    Returns ``(owner, disp)``: an (H, W) int array holding the claiming
    location or -1 for background, and (H, W, 2) displacements (NaN on
    background).
    """
    view = _view(table, cam)
    Z = np.asarray(Z, dtype=bool)
    H, W = view.shape
    visible = Z & (rng.random(Z.size) < params.o)
    flag = visible[view.cover_loc]
    pix = view.pair_pix[flag]
    first_pix, first = np.unique(pix, return_index=True)
    sel = np.flatnonzero(flag)[first]
    owner = np.full(H * W, -1, dtype=np.int64)
    owner[first_pix] = view.cover_loc[sel]
    disp = np.full((H * W, 2), np.nan)
    disp[first_pix] = view.pair_disp[sel]
    return owner.reshape(H, W), disp.reshape(H, W, 2)


@dataclass
class ExactObservation:
    """Per-pixel categorical P^g over background and displacement outcomes."""

    shape: tuple
    background: np.ndarray   # (H*W,) P(background)
    pix: np.ndarray          # (P,) pixel of each displacement outcome
    loc: np.ndarray          # (P,) location producing it
    disp: np.ndarray         # (P, 2) displacement value
    mass: np.ndarray         # (P,) probability


def observation_distribution_exact(Z, table, cam, params: OcclusionParams) -> ExactObservation:
    """Closed form of the generative model at every pixel.

    An occupied coverer with ``n`` occupied coverers strictly nearer gets mass
    ``o (1 - o)^n``; background gets ``(1 - o)^n_total``.
    """
    view = _view(table, cam)
    Z = np.asarray(Z, dtype=bool)
    H, W = view.shape
    occ = Z[view.cover_loc].astype(np.int64)
    cs = np.cumsum(occ)
    start = view.cover_ptr[:-1]
    base = np.concatenate([[0], cs])[start]          # occupied count before each pixel's run
    n_tot = np.concatenate([[0], cs])[view.cover_ptr[1:]] - base
    nearer = cs - occ - base[view.pair_pix]
    o = params.o
    sel = occ.astype(bool)
    return ExactObservation(
        (H, W),
        (1.0 - o) ** n_tot.astype(float),
        view.pair_pix[sel],
        view.cover_loc[sel],
        view.pair_disp[sel],
        o * (1.0 - o) ** nearer[sel].astype(float),
    )


def oracle_observation_field(Z, table, cam, params: OcclusionParams, bank: GaussianModeBank,
                             noise: float = 0.0, rng: np.random.Generator | None = None) -> ObservationField:
    """Field a perfect detector would output, mixed with noise.

    Displacement mass goes to the mode with maximum responsibility for it.
    The result is ``(1 - noise) * ideal + noise * u`` where ``u`` is the flat
    distribution over background and the M modes, or, when ``rng`` is given,
    an independent uniform draw on that simplex per pixel.
    """
    if not 0 <= noise <= 1:
        raise ValueError("noise must lie in [0, 1]")
    if bank is None or bank.M < 1:
        raise ValueError("empty mode bank")
    view = _view(table, cam)
    ex = observation_distribution_exact(Z, view, cam, params)
    H, W = ex.shape
    M = bank.M
    ideal = np.zeros((M + 1, H * W))
    ideal[0] = ex.background
    if ex.pix.size:
        modes = bank.assign(ex.disp)
        np.add.at(ideal, (modes + 1, ex.pix), ex.mass)
    if rng is None:
        u = np.full_like(ideal, 1.0 / (M + 1))
    else:
        u = rng.dirichlet(np.ones(M + 1), size=H * W).T
    mixed = (1.0 - noise) * ideal + noise * u
    mixed = mixed.reshape(M + 1, H, W)
    return ObservationField(mixed[0], mixed[1:], view.camera.id)


def oracle_unary_scores(Z, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Per-location detection probabilities standing in for a trained classifier.

    Occupied: ``(1 - noise) + noise * UNARY_SPREAD * g`` with standard normal
    ``g``; empty: ``noise * u`` with ``u`` uniform on [0, 1).  Clamped to
    ``(SCORE_FLOOR, 1 - SCORE_FLOOR)``.
    """
    if not 0 <= noise < 0.5:
        raise ValueError("unary noise must lie in [0, 0.5)")
    Z = np.asarray(Z, dtype=bool)
    g = rng.standard_normal(Z.size)
    u = rng.random(Z.size)
    s = np.where(Z, (1.0 - noise) + noise * UNARY_SPREAD * g, noise * u)
    return np.clip(s, SCORE_FLOOR, 1.0 - SCORE_FLOOR)
