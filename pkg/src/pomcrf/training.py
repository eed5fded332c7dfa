"""Fitting without a network: displacement-mixture EM, unary calibration,
grid search of the energy scales and unsupervised self-training."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .discriminative import GaussianModeBank
from .evaluation import evaluate_frame
from .geometry import GroundGrid, ProjectionTable
from .inference import InferenceConfig, mean_field_infer
from .potentials import PotentialBundle
from .scene_sim import OcclusionParams, observation_distribution_exact, render_observation_sample

SIGMA_FLOOR = 0.01
DEAD_MODE = 1e-8


class EmptySampleSet(ValueError):
    pass


class EMCollapse(RuntimeError):
    pass


def map_ordered(fn, items, workers: int = 1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class DisplacementSampleSet:
    x: np.ndarray                    # (S, 2)
    weight: np.ndarray               # (S,) sample weights, 1 for drawn samples
    frame: np.ndarray                # (S,) provenance
    camera: np.ndarray
    pixel: np.ndarray

    def __len__(self):
        return len(self.x)

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())


def collect_displacement_samples(frames, table: ProjectionTable, params: OcclusionParams,
                                 rng: np.random.Generator | None = None, mode: str = "sample"
                                 ) -> DisplacementSampleSet:
    """Foreground displacements observed under the generative model.

    ``mode="sample"`` renders one draw per frame and camera.  ``mode="exact"``
    takes every possible outcome weighted by its probability, which makes the
    set a deterministic function of the occupancies.
    """
    frames = list(frames)
    if not frames:
        raise EmptySampleSet("no frames given")
    if mode == "sample" and rng is None:
        raise ValueError("sampling mode needs an rng")
    xs, ws, fr, cm, px = [], [], [], [], []
    for t, Z in enumerate(frames):
        Z = getattr(Z, "Z", Z)
        for c in range(len(table)):
            if mode == "sample":
                owner, disp = render_observation_sample(Z, table, c, params, rng)
                p = np.flatnonzero(owner.reshape(-1) >= 0)
                x = disp.reshape(-1, 2)[p]
                w = np.ones(p.size)
            elif mode == "exact":
                ex = observation_distribution_exact(Z, table, c, params)
                p, x, w = ex.pix, ex.disp, ex.mass
            else:
                raise ValueError(f"unknown collection mode {mode!r}")
            xs.append(x)
            ws.append(w)
            fr.append(np.full(p.size, t))
            cm.append(np.full(p.size, c))
            px.append(p)
    x = np.concatenate(xs) if xs else np.zeros((0, 2))
    if len(x) == 0:
        raise EmptySampleSet("no foreground observations in the given frames")
    return DisplacementSampleSet(x, np.concatenate(ws), np.concatenate(fr), np.concatenate(cm), np.concatenate(px))


@dataclass
class FitReport:
    log_likelihood: list = field(default_factory=list)   # weighted mean per sample
    reseeded: list = field(default_factory=list)         # (iteration, mode)
    bank: GaussianModeBank | None = None
    mixing: np.ndarray | None = None
    responsibility_mass: np.ndarray | None = None
    converged: bool = False


def _log_joint(x, alpha, sigma, logpi):
    z = (x[:, None, :] - alpha[None]) / sigma[None]
    return (-0.5 * (z ** 2).sum(axis=2) - np.log(2 * np.pi * sigma[:, 0] * sigma[:, 1])[None]
            + logpi[None])


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _kmeanspp(x, w, M, rng):
    n = len(x)
    centers = [x[rng.choice(n, p=w / w.sum())]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, M):
        p = w * d2
        if p.sum() <= 0:
            centers.append(x[rng.integers(n)])
        else:
            centers.append(x[rng.choice(n, p=p / p.sum())])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def fit_mode_bank(samples: DisplacementSampleSet, M: int = 8, em_iters: int = 200,
                  rng: np.random.Generator | None = None, init: GaussianModeBank | None = None,
                  tol: float = 1e-10) -> tuple[GaussianModeBank, FitReport]:
    """EM for a diagonal M-mode Gaussian mixture over displacements.

    ``init`` warm-starts the means and spreads (mixing weights restart uniform);
    otherwise k-means++ seeding draws from ``rng``.
    """
    x = np.asarray(samples.x, dtype=float)
    w = np.asarray(samples.weight, dtype=float)
    if len(x) < 10 * M:
        raise EmptySampleSet(f"need at least {10 * M} samples for {M} modes, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite displacement samples")
    rng = np.random.default_rng(0) if rng is None else rng
    # identical displacements are frequent (pixel lattice); merging them leaves EM unchanged
    x, inv = np.unique(x, axis=0, return_inverse=True)
    w = np.bincount(inv.reshape(-1), weights=w, minlength=len(x))
    W = w.sum()
    if init is not None:
        if init.M != M:
            raise ValueError(f"initial bank has {init.M} modes, expected {M}")
        alpha, sigma = init.alpha.copy(), init.sigma.copy()
    else:
        alpha = _kmeanspp(x, w, M, rng)
        near = np.argmin(((x[:, None] - alpha[None]) ** 2).sum(axis=2), axis=1)
        sigma = np.empty((M, 2))
        for m in range(M):
            sel = near == m
            sw = w[sel].sum()
            if sw > 0:
                sigma[m] = np.sqrt((w[sel, None] * (x[sel] - alpha[m]) ** 2).sum(axis=0) / sw)
            else:
                sigma[m] = x.std(axis=0)
        sigma = np.maximum(sigma, SIGMA_FLOOR)
    logpi = np.full(M, -np.log(M))
    report = FitReport()
    for it in range(em_iters):
        lj = _log_joint(x, alpha, sigma, logpi)
        ll = _logsumexp(lj)
        report.log_likelihood.append(float(w @ ll / W))
        resp = np.exp(lj - ll[:, None]) * w[:, None]
        mass = resp.sum(axis=0)
        if it > 0 and abs(report.log_likelihood[-1] - report.log_likelihood[-2]) < tol:
            report.converged = True
            break
        dead = np.flatnonzero(mass < DEAD_MODE * W)
        live = mass >= DEAD_MODE * W
        alpha = np.where(live[:, None], (resp.T @ x) / np.maximum(mass, 1e-300)[:, None], alpha)
        var = np.einsum("nm,nmd->md", resp, (x[:, None] - alpha[None]) ** 2) / np.maximum(mass, 1e-300)[:, None]
        sigma = np.where(live[:, None], np.sqrt(np.maximum(var, SIGMA_FLOOR ** 2)), sigma)
        logpi = np.log(np.maximum(mass, 1e-300) / W)
        for m in dead:
            # restart at the worst-explained sample
            alpha[m] = x[np.argmin(ll)]
            sigma[m] = np.maximum(x.std(axis=0) / M, SIGMA_FLOOR)
            logpi[m] = np.log(1.0 / len(x))
            report.reseeded.append((it, int(m)))
        logpi = logpi - _logsumexp(logpi[None])[0]
    lj = _log_joint(x, alpha, sigma, logpi)
    final = float(w @ _logsumexp(lj) / W)
    if report.log_likelihood[-1] != final:
        report.log_likelihood.append(final)
    bank = GaussianModeBank(alpha, sigma)
    report.bank = bank
    report.mixing = np.exp(logpi)
    report.responsibility_mass = np.exp(lj - _logsumexp(lj)[:, None]).T @ w
    return bank, report


# ---------------------------------------------------------------------------
# unary calibration


@dataclass(frozen=True)
class UnaryCalibration:
    """Calibrated score sigmoid(a * logit(s) + b)."""

    a: float = 1.0
    b: float = 0.0

    def apply(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        z = self.a * (np.log(s) - np.log1p(-s)) + self.b
        out = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.clip(out, 1e-6, 1 - 1e-6)


def fit_unary_calibration(scores, labels, ridge: float = 1e-3, iters: int = 50) -> UnaryCalibration:
    """Two-parameter logistic regression of labels on score log-odds (Newton)."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if s.size != y.size or s.size == 0:
        raise ValueError("scores and labels must be nonempty and aligned")
    X = np.stack([np.log(s) - np.log1p(-s), np.ones_like(s)], axis=1)
    theta = np.array([1.0, 0.0])
    prior = theta.copy()
    for _ in range(iters):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ theta)))
        g = X.T @ (p - y) + ridge * (theta - prior)
        Hm = (X * (p * (1 - p))[:, None]).T @ X + ridge * np.eye(2)
        step = np.linalg.solve(Hm, g)
        theta = theta - step
        if np.abs(step).max() < 1e-12:
            break
    return UnaryCalibration(float(theta[0]), float(theta[1]))


# ---------------------------------------------------------------------------
# scale search


@dataclass
class LabeledFrame:
    fields: list
    unary: np.ndarray | None     # (V, N) raw scores
    Z: np.ndarray


@dataclass
class ScaleSearch:
    best: tuple
    scores: dict                 # (mu_u, mu_h) -> mean MODA


def score_frames(bundle: PotentialBundle, frames: Sequence[LabeledFrame], table, grid, bank, cfg,
                 variant="full", r=0.5, workers=1, calibration: UnaryCalibration | None = None):
    """Per-frame MODA of Mean-Field POMs under ``bundle``."""
    covered = table.covered()

    def one(fr):
        u = fr.unary if calibration is None or fr.unary is None else calibration.apply(fr.unary)
        b = bundle.with_(unary=u) if u is not None else bundle.with_(unary=None, mu_u=0.0)
        res = mean_field_infer(b, fr.fields, table, grid, cfg, bank, variant)
        return evaluate_frame(res.q, fr.Z, grid, r, mask=covered).moda

    return np.array(map_ordered(one, frames, workers))


def grid_search_scales(mu_u_values, mu_h_values, frames: Sequence[LabeledFrame], table: ProjectionTable,
                       grid: GroundGrid, bank, bundle: PotentialBundle, cfg: InferenceConfig = InferenceConfig(),
                       variant: str = "full", r: float = 0.5, workers: int = 1) -> ScaleSearch:
    """Mean MODA for every (mu_u, mu_h) pair; ties go to smaller mu_h, then smaller mu_u."""
    if not frames:
        raise ValueError("grid search needs at least one labeled frame")
    cands = sorted({(float(u), float(h)) for u in mu_u_values for h in mu_h_values},
                   key=lambda p: (p[1], p[0]))
    if any(u < 0 or h < 0 for u, h in cands):
        raise ValueError("scales must be non-negative")
    scores, best, best_score = {}, None, -np.inf
    for mu_u, mu_h in cands:
        s = float(np.mean(score_frames(bundle.with_(mu_u=mu_u, mu_h=mu_h), frames, table, grid, bank,
                                       cfg, variant, r, workers)))
        scores[(mu_u, mu_h)] = s
        if s > best_score:
            best, best_score = (mu_u, mu_h), s
    return ScaleSearch(best, scores)


# ---------------------------------------------------------------------------
# unsupervised EM


@dataclass
class EMFrame:
    """Evidence for one frame: fields as a function of the current bank, and raw unaries."""

    fields: Callable[[GaussianModeBank], list]
    unary: np.ndarray | None = None
    Z: np.ndarray | None = None  # held-out truth, diagnostics only


@dataclass
class EMReport:
    bank: GaussianModeBank
    calibration: UnaryCalibration
    banks: list = field(default_factory=list)        # bank entering each round
    moda: list = field(default_factory=list)         # per round, with the round's input parameters
    final_moda: float | None = None
    alpha_change: list = field(default_factory=list)
    fits: list = field(default_factory=list)


def unsupervised_em(frames: Sequence[EMFrame], table: ProjectionTable, grid: GroundGrid,
                    bank: GaussianModeBank, bundle: PotentialBundle, rng: np.random.Generator,
                    rounds: int = 6, cfg: InferenceConfig = InferenceConfig(), params: OcclusionParams | None = None,
                    calibration: UnaryCalibration = UnaryCalibration(), samples_per_frame: int = 1,
                    collect: str = "exact", variant: str = "full", r: float = 0.5, workers: int = 1,
                    em_iters: int = 200) -> EMReport:
    """Alternate Mean-Field inference, hard sampling Z ~ Q and refitting.

    Truth, when present, is only used for the reported MODA.
    """
    params = OcclusionParams(bundle.o) if params is None else params
    report = EMReport(bank, calibration)
    covered = table.covered()
    if rounds <= 0:
        return report

    def infer(b, cal):
        def one(fr):
            u = None if fr.unary is None else cal.apply(fr.unary)
            bb = bundle.with_(unary=u) if u is not None else bundle.with_(unary=None, mu_u=0.0)
            return mean_field_infer(bb, fr.fields(b), table, grid, cfg, b, variant).q
        return map_ordered(one, frames, workers)

    def score(qs):
        if any(fr.Z is None for fr in frames):
            return None
        return float(np.mean([evaluate_frame(q, fr.Z, grid, r, mask=covered).moda
                              for q, fr in zip(qs, frames)]))

    for rnd in range(rounds):
        report.banks.append(bank)
        qs = infer(bank, calibration)
        report.moda.append(score(qs))
        if all(np.all(q[covered] < cfg.prior) for q in qs):
            raise EMCollapse(f"round {rnd + 1}: every POM fell below the prior")
        sampled, scores, labels = [], [], []
        for q, fr in zip(qs, frames):
            for _ in range(samples_per_frame):
                Z = rng.random(q.size) < q
                sampled.append(Z)
                if fr.unary is not None:
                    scores.append(fr.unary.max(axis=0))
                    labels.append(Z)
        try:
            samples = collect_displacement_samples(sampled, table, params, rng, collect)
        except EmptySampleSet as e:
            raise EMCollapse(f"round {rnd + 1}: {e}") from e
        new_bank, fit = fit_mode_bank(samples, bank.M, em_iters, rng, init=bank)
        report.fits.append(fit)
        report.alpha_change.append(float(np.abs(new_bank.alpha - bank.alpha).max()))
        bank = new_bank
        if scores:
            calibration = fit_unary_calibration(np.concatenate(scores), np.concatenate(labels))
    report.bank, report.calibration = bank, calibration
    report.final_moda = score(infer(bank, calibration))
    return report
