"""Mean-Field inference of the Probabilistic Occupancy Map.

The high-order terms are handled through their binary pattern
approximation.  Gaussian modes become boxes, mode weights are thresholded,
and every foreground pixel ``k`` yields a set ``C_k`` of compatible
locations.  A foreground pixel costs ``C = -mu_h log eps`` when no location
of ``C_k`` is occupied.  A background-only pixel costs ``C`` times the
probability that the generative model renders it as foreground.  This
pattern energy is

    psi~(Z) = -C sum_fg [Z_j = 0 for all j in C_k]
              - C sum_bg (1 - prod_{j in L_k} (1 - o Z_j))

and its Mean-Field gradient has a closed form in products of ``1 - q``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .discriminative import (FlatModeBank, GaussianModeBank, default_threshold,
                             simple_binary_field, threshold_field)
from .geometry import GroundGrid, ProjectionTable
from .potentials import PotentialBundle, pairwise_matrix, total_energy

Q_MIN = 1e-6
Q_MAX = 1.0 - 1e-6
ETA_MIN = float(np.log(Q_MIN) - np.log1p(-Q_MIN))
ETA_MAX = -ETA_MIN
MAX_ENUMERATION = 20


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(q):
    q = np.asarray(q, dtype=float)
    return np.log(q) - np.log1p(-q)


@dataclass
class MeanFieldState:
    eta: np.ndarray
    iteration: int = 0

    @classmethod
    def from_q(cls, q):
        q = np.clip(np.asarray(q, dtype=float), Q_MIN, Q_MAX)
        return cls(np.clip(logit(q), ETA_MIN, ETA_MAX))

    @property
    def q(self) -> np.ndarray:
        return sigmoid(self.eta)


@dataclass
class InferenceConfig:
    iterations: int = 30
    step: float = 0.01
    prior: float = 0.01
    tol: float | None = None        # early stop on max |dq|; None runs all iterations
    tau_b: float | None = None      # None: half the noise-free peak weight, 0.5 * o
    tau_h: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not 0 < self.prior < 1:
            raise ValueError("prior must lie in (0, 1)")

    def thresholds(self, o: float, M: int):
        t = default_threshold(o, 0.0, M)
        return (t if self.tau_b is None else self.tau_b,
                t if self.tau_h is None else self.tau_h)


# ---------------------------------------------------------------------------
# compatible explanations


@dataclass
class CameraExplanations:
    ptr: np.ndarray          # (H*W + 1,) CSR pointers
    loc: np.ndarray          # compatible locations, near to far
    foreground: np.ndarray   # (H*W,) pixels with an active mode
    background: np.ndarray   # (H*W,) background-compatible pixels without activation

    def at(self, p: int) -> np.ndarray:
        return self.loc[self.ptr[p]:self.ptr[p + 1]]


@dataclass
class CompatibleExplanations:
    cameras: list

    def __getitem__(self, c) -> CameraExplanations:
        return self.cameras[c]


def _in_boxes(disp, boxes):
    """(P, M) containment of displacements in (M, 4) boxes, edges inclusive."""
    x, y = disp[:, 0:1], disp[:, 1:2]
    return ((x >= boxes[None, :, 0]) & (x <= boxes[None, :, 2])
            & (y >= boxes[None, :, 1]) & (y <= boxes[None, :, 3]))


def compatible_explanations(binary_fields, table: ProjectionTable, bank: GaussianModeBank) -> CompatibleExplanations:
    """C_k: locations ``i`` covering ``k`` whose displacement falls in an active box."""
    boxes = bank.boxes()
    out = []
    for view, bf in zip(table.views, binary_fields):
        if bf.shape != view.shape:
            raise ValueError(f"field shape {bf.shape} does not match camera {view.camera.id} {view.shape}")
        act = bf.active.reshape(bf.M, -1)
        pix = view.pair_pix
        ok = np.any(act[:, pix].T & _in_boxes(view.pair_disp, boxes), axis=1)
        counts = np.bincount(pix[ok], minlength=act.shape[1])
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        fg = act.any(axis=0)
        bg = bf.background.reshape(-1) & ~fg
        out.append(CameraExplanations(ptr, view.cover_loc[ok], fg, bg))
    return CompatibleExplanations(out)


# ---------------------------------------------------------------------------
# gradients


def grad_unary(state: MeanFieldState, bundle: PotentialBundle) -> np.ndarray:
    if bundle.unary is None or bundle.mu_u == 0:
        return np.zeros_like(state.eta)
    return bundle.mu_u * bundle.unary_logodds()


def full_kernel(kernel: np.ndarray) -> np.ndarray:
    """(2r+1)-square kernel from the (|dy|, |dx|)-indexed half kernel, center zeroed."""
    ry, rx = kernel.shape
    dy = np.abs(np.arange(-(ry - 1), ry))
    dx = np.abs(np.arange(-(rx - 1), rx))
    K = kernel[dy[:, None], dx[None, :]].copy()
    K[ry - 1, rx - 1] = 0.0
    return K


def grad_pairwise(state: MeanFieldState, bundle: PotentialBundle, grid: GroundGrid) -> np.ndarray:
    """-sum_j E_p[i, j] q_j, as a 2D convolution of the occupancy map."""
    q = state.q.reshape(grid.shape)
    conv = ndimage.convolve(q, full_kernel(bundle.kernel), mode="constant", cval=0.0)
    return -conv.reshape(-1)


def grad_high_order(state: MeanFieldState, expl: CompatibleExplanations, table: ProjectionTable,
                    bundle: PotentialBundle) -> np.ndarray:
    """Pattern-energy gradient by direct products over each pixel's sets.

    Reference implementation, one pixel at a time.
    """
    q = np.clip(state.q, Q_MIN, Q_MAX)
    g = np.zeros_like(q)
    C, o = bundle.C, bundle.o
    for view, ce in zip(table.views, expl.cameras):
        for p in np.flatnonzero(ce.foreground):
            members = ce.at(p)
            for a, i in enumerate(members):
                others = np.delete(members, a)
                g[i] += C * np.prod(1.0 - q[others])
        for p in np.flatnonzero(ce.background):
            members = view.cover_loc[view.cover_ptr[p]:view.cover_ptr[p + 1]]
            for a, i in enumerate(members):
                others = np.delete(members, a)
                g[i] -= C * o * np.prod(1.0 - o * q[others])
    return g


def _submasks(mask: int):
    sub = mask
    while sub:
        yield sub
        sub = (sub - 1) & mask


def _pixel_range(lo_edge, hi_edge, t0, t1):
    """Integer pixel range whose relative coordinate lies in [lo_edge, hi_edge].

    ``t0, t1`` are the (N,) box edges of the location rectangles along one
    axis.  Uses the same arithmetic as :func:`relative_coords` so that the
    result agrees with pointwise containment tests.
    """
    c = 0.5 * (t0 + t1)
    w = t1 - t0
    start = np.floor(c + w * lo_edge) - 1
    fails = sum(((start + j - c) / w < lo_edge) for j in range(4))
    lo = start + fails
    end = np.floor(c + w * hi_edge) + 2
    fails = sum(((end - j - c) / w > hi_edge) for j in range(4))
    hi = end - fails
    return lo.astype(np.int64), hi.astype(np.int64)


class _FastCamera:
    """Integral-image machinery for one camera."""

    def __init__(self, view, bf, boxes):
        H, W = view.shape
        self.H, self.W = H, W
        locs = np.flatnonzero(view.in_view)
        self.locs = locs
        clip = view.clipped[locs].astype(np.int64)
        rect = view.rects[locs].astype(float)
        M = boxes.shape[0]

        # per mode, the sub-rectangle of each location's box it explains
        mx0, mx1 = _pixel_range(boxes[:, 0][:, None], boxes[:, 2][:, None], rect[None, :, 0], rect[None, :, 2])
        my0, my1 = _pixel_range(boxes[:, 1][:, None], boxes[:, 3][:, None], rect[None, :, 1], rect[None, :, 3])
        mx0 = np.maximum(mx0, clip[None, :, 0])
        my0 = np.maximum(my0, clip[None, :, 1])
        mx1 = np.minimum(mx1, clip[None, :, 2])
        my1 = np.minimum(my1, clip[None, :, 3])

        act = bf.active.reshape(M, -1)
        bits = (act.astype(np.int64) << np.arange(M, dtype=np.int64)[:, None]).sum(axis=0)
        self.fg = bits > 0
        self.bg = bf.background.reshape(-1) & ~self.fg
        subsets = sorted({t for b in np.unique(bits[self.fg]) for t in _submasks(int(b))})
        self.n_sub = len(subsets)
        self.masks = np.zeros((self.n_sub, H * W), dtype=bool)
        self.sign = np.zeros(self.n_sub)
        qt, qi, qx0, qy0, qx1, qy1 = [], [], [], [], [], []
        for s, t in enumerate(subsets):
            members = [m for m in range(M) if t >> m & 1]
            self.masks[s] = (bits & t) == t
            self.sign[s] = 1.0 if len(members) % 2 else -1.0
            x0 = mx0[members].max(axis=0)
            y0 = my0[members].max(axis=0)
            x1 = mx1[members].min(axis=0)
            y1 = my1[members].min(axis=0)
            keep = (x0 <= x1) & (y0 <= y1)
            qt.append(np.full(keep.sum(), s))
            qi.append(np.flatnonzero(keep))
            for acc, v in zip((qx0, qy0, qx1, qy1), (x0, y0, x1, y1)):
                acc.append(v[keep])
        cat = (lambda a: np.concatenate(a).astype(np.int64)) if subsets else (lambda a: np.zeros(0, np.int64))
        self.fg_t, self.fg_i = cat(qt), cat(qi)
        self.fg_rects = tuple(cat(a) for a in (qx0, qy0, qx1, qy1))
        self.coef = self.sign[:, None] * self.masks
        self.bg_rects = tuple(clip[:, j] for j in range(4))

    def _corners(self, t, rects):
        """Flat indices into (n, H+1, W+1) grids of the four rectangle corners."""
        x0, y0, x1, y1 = rects
        stride = (self.H + 1) * (self.W + 1)
        base = t * stride
        W1 = self.W + 1
        return (base + y0 * W1 + x0, base + y0 * W1 + x1 + 1,
                base + (y1 + 1) * W1 + x0, base + (y1 + 1) * W1 + x1 + 1)

    def _scatter(self, t, rects, values, n):
        """sum_r values[r] * [pixel in rect r], one map per index in ``t``."""
        a, b, c, d = self._corners(t, rects)
        size = n * (self.H + 1) * (self.W + 1)
        idx = np.concatenate([a, b, c, d])
        w = np.concatenate([values, -values, -values, values])
        D = np.bincount(idx, weights=w, minlength=size).reshape(n, self.H + 1, self.W + 1)
        D = D.cumsum(axis=1).cumsum(axis=2)
        return D[:, :self.H, :self.W].reshape(n, -1)

    def _rect_sums(self, maps, t, rects):
        n = maps.shape[0]
        sat = np.zeros((n, self.H + 1, self.W + 1))
        sat[:, 1:, 1:] = maps.reshape(n, self.H, self.W).cumsum(axis=1).cumsum(axis=2)
        flat = sat.reshape(-1)
        a, b, c, d = self._corners(t, rects)
        return flat[d] - flat[b] - flat[c] + flat[a]

    def log_products(self, q, o):
        """log prod over C_k of (1 - q) and over L_k of (1 - o q), per pixel."""
        HW = self.H * self.W
        log_a = np.zeros(HW)
        if self.n_sub:
            lq = np.log1p(-q)[self.locs][self.fg_i]
            D = self._scatter(self.fg_t, self.fg_rects, lq, self.n_sub)
            log_a = (self.coef * D).sum(axis=0)
        lb = np.log1p(-o * q)[self.locs]
        log_b = self._scatter(np.zeros(self.locs.size, np.int64), self.bg_rects, lb, 1)[0]
        return log_a, log_b

    def gradient(self, q, C, o):
        g = np.zeros(q.size)
        log_a, log_b = self.log_products(q, o)
        if self.n_sub:
            A = np.where(self.fg, np.exp(log_a), 0.0)
            sums = self._rect_sums(self.masks * A[None], self.fg_t, self.fg_rects)
            per = np.bincount(self.fg_i, weights=self.sign[self.fg_t] * sums, minlength=self.locs.size)
            g[self.locs] += C * per / (1.0 - q[self.locs])
        B = np.where(self.bg, np.exp(log_b), 0.0)
        sums = self._rect_sums(B[None], np.zeros(self.locs.size, np.int64), self.bg_rects)
        g[self.locs] -= C * o * sums / (1.0 - o * q[self.locs])
        return g

    def expected_energy(self, q, C, o):
        """E_Q of the pattern energy restricted to this camera."""
        log_a, log_b = self.log_products(q, o)
        fg = -C * np.exp(log_a[self.fg]).sum()
        bg = -C * (1.0 - np.exp(log_b[self.bg])).sum()
        return fg + bg


class FastHighOrder:
    """Precomputed integral-image evaluator of the pattern gradient."""

    def __init__(self, binary_fields, table: ProjectionTable, bank: GaussianModeBank):
        boxes = bank.boxes()
        self.cameras = [_FastCamera(v, bf, boxes) for v, bf in zip(table.views, binary_fields)]

    def gradient(self, q, bundle: PotentialBundle) -> np.ndarray:
        q = np.clip(q, Q_MIN, Q_MAX)
        g = np.zeros(q.size)
        for cam in self.cameras:
            g += cam.gradient(q, bundle.C, bundle.o)
        return g

    def expected_energy(self, q, bundle: PotentialBundle) -> float:
        q = np.clip(q, Q_MIN, Q_MAX)
        return float(sum(cam.expected_energy(q, bundle.C, bundle.o) for cam in self.cameras))


def grad_high_order_fast(state: MeanFieldState, binary_fields, table: ProjectionTable,
                         bank: GaussianModeBank, bundle: PotentialBundle) -> np.ndarray:
    return FastHighOrder(binary_fields, table, bank).gradient(state.q, bundle)


# ---------------------------------------------------------------------------
# Mean-Field


def binarize(fields, variant: str, bundle: PotentialBundle, cfg: InferenceConfig, bank=None):
    """Binary fields and box bank for a high-order variant ("full" or "simple")."""
    if variant == "full":
        tau_b, tau_h = cfg.thresholds(bundle.o, bank.M)
        return [threshold_field(f, tau_b, tau_h) for f in fields], bank
    if variant == "simple":
        tau_b, tau_h = cfg.thresholds(bundle.o, 1)
        return [simple_binary_field(f, tau_b, tau_h) for f in fields], FlatModeBank()
    raise ValueError(f"unknown high-order variant {variant!r}")


def entropy(q) -> float:
    q = np.clip(q, Q_MIN, Q_MAX)
    return float(-(q * np.log(q) + (1 - q) * np.log1p(-q)).sum())


@dataclass
class InferenceResult:
    q: np.ndarray
    eta: np.ndarray
    free_energy: list = field(default_factory=list)
    max_dq: list = field(default_factory=list)
    uncovered: np.ndarray | None = None
    iterations: int = 0


class MeanField:
    """Synchronous natural-gradient Mean-Field solver for one frame."""

    def __init__(self, bundle: PotentialBundle, fields, table: ProjectionTable, grid: GroundGrid,
                 cfg: InferenceConfig = InferenceConfig(), bank: GaussianModeBank | None = None,
                 variant: str = "full"):
        if not fields and variant != "none":
            raise ValueError("at least one camera field is required")
        self.bundle, self.table, self.grid, self.cfg = bundle, table, grid, cfg
        self.covered = table.covered()
        self.hi = None
        if variant != "none" and bundle.mu_h > 0:
            binary, box_bank = binarize(fields, variant, bundle, cfg, bank)
            self.hi = FastHighOrder(binary, table, box_bank)
        self.u = grad_unary(MeanFieldState(np.zeros(grid.N)), bundle)
        self.E = pairwise_matrix(bundle.kernel, grid) if np.any(bundle.kernel) else None

    def gradient(self, state: MeanFieldState) -> np.ndarray:
        g = self.u.copy()
        if self.E is not None:
            g += grad_pairwise(state, self.bundle, self.grid)
        if self.hi is not None:
            g += self.hi.gradient(state.q, self.bundle)
        return g

    def free_energy(self, q) -> float:
        """-E_Q[pattern energy] - H(Q); Mean-Field minimizes it."""
        q = np.clip(q, Q_MIN, Q_MAX)
        e = float(q @ self.u)
        if self.E is not None:
            e -= 0.5 * float(q @ self.E @ q)
        if self.hi is not None:
            e += self.hi.expected_energy(q, self.bundle)
        return -e - entropy(q)

    def run(self, q0=None) -> InferenceResult:
        cfg = self.cfg
        q0 = np.full(self.grid.N, cfg.prior) if q0 is None else np.asarray(q0, dtype=float)
        state = MeanFieldState.from_q(q0)
        frozen = ~self.covered
        eta0 = state.eta.copy()
        res = InferenceResult(state.q, state.eta, [self.free_energy(state.q)], [], frozen)
        for it in range(cfg.iterations):
            q_old = state.q
            g = self.gradient(state)
            eta = (1.0 - cfg.step) * state.eta + cfg.step * g
            eta[frozen] = eta0[frozen]
            state = MeanFieldState(np.clip(eta, ETA_MIN, ETA_MAX), it + 1)
            q = state.q
            res.free_energy.append(self.free_energy(q))
            res.max_dq.append(float(np.abs(q - q_old).max()))
            if cfg.tol is not None and res.max_dq[-1] < cfg.tol:
                break
        res.q, res.eta, res.iterations = state.q, state.eta, state.iteration
        return res


def mean_field_infer(bundle: PotentialBundle, fields, table: ProjectionTable, grid: GroundGrid,
                     cfg: InferenceConfig = InferenceConfig(), bank: GaussianModeBank | None = None,
                     variant: str = "full", q0=None) -> InferenceResult:
    """POM for one frame.  ``variant`` selects the high-order term: full, simple or none."""
    return MeanField(bundle, fields, table, grid, cfg, bank, variant).run(q0)


# ---------------------------------------------------------------------------
# exact reference


def all_states(N: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    stop = 2 ** N if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(N, dtype=np.int64)[None]) & 1).astype(bool)


@dataclass
class ExactPosterior:
    marginals: np.ndarray
    log_partition: float
    map_state: np.ndarray
    energies: np.ndarray     # psi(Z) for every state, state index = sum_i Z_i 2^i


def exact_posterior_enumeration(bundle: PotentialBundle, fields, table: ProjectionTable, grid: GroundGrid,
                                bank: GaussianModeBank | None = None, high_order: str = "full",
                                chunk: int = 4096) -> ExactPosterior:
    N = grid.N
    if N > MAX_ENUMERATION:
        raise ValueError(f"enumeration limited to N <= {MAX_ENUMERATION}, got {N}")
    total = 2 ** N
    energies = np.empty(total)
    for start in range(0, total, chunk):
        Z = all_states(N, start, min(start + chunk, total))
        energies[start:start + len(Z)] = total_energy(Z, bundle, fields, table, grid, bank, high_order)
    mx = energies.max()
    logZ = float(mx + np.log(np.exp(energies - mx).sum()))
    p = np.exp(energies - logZ)
    marg = np.zeros(N)
    for start in range(0, total, chunk):
        Z = all_states(N, start, min(start + chunk, total))
        marg += p[start:start + len(Z)] @ Z
    return ExactPosterior(marg, logZ, all_states(N, int(np.argmax(energies)), int(np.argmax(energies)) + 1)[0],
                          energies)


def kl_to_exact(q, exact: ExactPosterior) -> float:
    """KL(Q || P) for a factorized Q against an enumerated posterior."""
    q = np.clip(np.asarray(q, dtype=float), Q_MIN, Q_MAX)
    N = q.size
    Z = all_states(N)
    logq = Z @ np.log(q) + (~Z) @ np.log1p(-q)
    logp = exact.energies - exact.log_partition
    return float(np.exp(logq) @ (logq - logp))
