"""Exact CRF energies for a given occupancy.

Every function accepts a single assignment ``Z`` of shape (N,) or a batch of
assignments of shape (S, N) and returns a float or an (S,) array.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .discriminative import EPSILON, GaussianModeBank, pair_densities
from .geometry import GroundGrid


def uniform_kernel(value: float = 10.0, radius: int = 1) -> np.ndarray:
    """Kernel indexed by (|dy|, |dx|), constant inside ``radius`` (Chebyshev)."""
    k = np.full((radius + 1, radius + 1), float(value))
    k[0, 0] = 0.0
    return k


@dataclass
class PotentialBundle:
    mu_u: float = 1.0
    mu_h: float = 1.0
    kernel: np.ndarray = field(default_factory=uniform_kernel)
    o: float = 0.9
    eps: float = EPSILON
    unary: np.ndarray | None = None      # (V, N) per-view probabilities

    def __post_init__(self):
        if self.mu_u < 0 or self.mu_h < 0:
            raise ValueError("energy scales must be non-negative")
        self.kernel = np.atleast_2d(np.asarray(self.kernel, dtype=float))
        if np.any(self.kernel < 0):
            raise ValueError("pairwise kernel must be non-negative")
        if not 0 < self.eps <= 1e-3:
            raise ValueError("eps must lie in (0, 1e-3]")
        if not 0 < self.o <= 1:
            raise ValueError("o must lie in (0, 1]")
        if self.unary is not None:
            self.unary = np.atleast_2d(np.asarray(self.unary, dtype=float))

    @property
    def C(self) -> float:
        """Energy of one unexplained pixel, -mu_h log eps."""
        return -self.mu_h * np.log(self.eps)

    def with_(self, **kw) -> "PotentialBundle":
        return replace(self, **kw)

    def unary_logodds(self) -> np.ndarray:
        """max over views of log(s / (1 - s)), per location."""
        if self.unary is None:
            raise ValueError("bundle has no unary scores")
        s = self.unary
        if np.any(s <= 0) or np.any(s >= 1):
            raise ValueError("unary scores must lie strictly inside (0, 1)")
        return np.max(np.log(s) - np.log1p(-s), axis=0)


def pairwise_matrix(kernel: np.ndarray, grid: GroundGrid) -> np.ndarray:
    """Dense (N, N) matrix of E_p[|dy|, |dx|] with a zero diagonal."""
    xy = grid.cell_coords()
    dx = np.abs(xy[:, None, 0] - xy[None, :, 0])
    dy = np.abs(xy[:, None, 1] - xy[None, :, 1])
    ry, rx = kernel.shape
    inside = (dx < rx) & (dy < ry)
    E = np.zeros((grid.N, grid.N))
    E[inside] = kernel[dy[inside], dx[inside]]
    np.fill_diagonal(E, 0.0)
    return E


def _group_sum(values, ptr):
    """Sum (S, P) pair values into (S, npix) pixel totals; pairs grouped by pixel."""
    pad = np.zeros((values.shape[0], values.shape[1] + 1), dtype=values.dtype)
    np.cumsum(values, axis=1, out=pad[:, 1:])
    return pad[:, ptr[1:]] - pad[:, ptr[:-1]]


def _states(Z):
    Z = np.asarray(Z)
    return Z.reshape(1, -1).astype(float) if Z.ndim == 1 else Z.astype(float), Z.ndim == 1


def _ret(v, single):
    return float(v[0]) if single else v


def psi_unary(Z, bundle: PotentialBundle):
    S, single = _states(Z)
    if bundle.mu_u == 0:
        return _ret(np.zeros(S.shape[0]), single)
    return _ret(bundle.mu_u * S @ bundle.unary_logodds(), single)


def psi_pairwise(Z, bundle: PotentialBundle, grid: GroundGrid):
    """-sum over unordered pairs i < j of E_p[i, j] Z_i Z_j."""
    S, single = _states(Z)
    E = pairwise_matrix(bundle.kernel, grid)
    return _ret(-0.5 * np.einsum("si,ij,sj->s", S, E, S), single)


def psi_high_order_simple(Z, fields, table, bundle: PotentialBundle):
    """Foreground/background agreement: mu_h log P^d(x^g) summed over pixels.

    ``x^g`` is foreground iff an occupied location covers the pixel.
    """
    S, single = _states(Z)
    S = S.astype(bool)
    total = np.zeros(S.shape[0])
    if bundle.mu_h == 0:
        return _ret(total, single)
    for view, fld in zip(table.views, fields):
        fb = fld.f_b.reshape(-1).astype(float)
        covered = _group_sum(S[:, view.cover_loc].astype(np.int64), view.cover_ptr) > 0
        p = np.where(covered, 1.0 - fb[None], fb[None])
        total += np.log(np.maximum(p, bundle.eps)).sum(axis=1)
    return _ret(bundle.mu_h * total, single)


def psi_high_order_full(Z, fields, bank: GaussianModeBank, table, bundle: PotentialBundle):
    """Probability-product agreement between P^g(. | Z) and P^d, per pixel."""
    S, single = _states(Z)
    S = S.astype(bool)
    total = np.zeros(S.shape[0])
    if bundle.mu_h == 0:
        return _ret(total, single)
    o = bundle.o
    for view, fld in zip(table.views, fields):
        fb = fld.f_b.reshape(-1).astype(float)
        dens = pair_densities(fld, bank, view.pair_pix, view.pair_disp)
        occ = S[:, view.cover_loc].astype(np.int64)          # (S, P)
        cs = np.cumsum(occ, axis=1)
        pad = np.concatenate([np.zeros((S.shape[0], 1), dtype=np.int64), cs], axis=1)
        base = pad[:, view.cover_ptr[:-1]]                   # (S, npix)
        n_tot = pad[:, view.cover_ptr[1:]] - base
        nearer = cs - occ - base[:, view.pair_pix]
        fg_terms = occ * o * (1.0 - o) ** nearer * dens[None]
        fg = _group_sum(fg_terms, view.cover_ptr)
        mass = (1.0 - o) ** n_tot * fb[None] + fg
        total += np.log(np.maximum(mass, bundle.eps)).sum(axis=1)
    return _ret(bundle.mu_h * total, single)


def total_energy(Z, bundle: PotentialBundle, fields, table, grid: GroundGrid,
                 bank: GaussianModeBank | None = None, high_order: str = "full"):
    """psi_h + psi_u + psi_p; ``high_order`` is "full", "simple" or "none"."""
    S, single = _states(Z)
    e = np.zeros(S.shape[0])
    if bundle.unary is not None and bundle.mu_u != 0:
        e += psi_unary(S, bundle)
    if np.any(bundle.kernel):
        e += psi_pairwise(S, bundle, grid)
    if high_order == "full":
        e += psi_high_order_full(S, fields, bank, table, bundle)
    elif high_order == "simple":
        e += psi_high_order_simple(S, fields, table, bundle)
    elif high_order != "none":
        raise ValueError(f"unknown high-order variant {high_order!r}")
    return _ret(e, single)
