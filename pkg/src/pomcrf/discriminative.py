"""Per-pixel discriminative distributions over body-relative displacements.

An observation field stores, for every pixel of one camera, the probability
``f_b`` that the pixel is background and the weights ``f_h`` of ``M``
Gaussian modes shared across the whole rig (the :class:`GaussianModeBank`).
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

EPSILON = 1e-6
FIELD_MAGIC = b"OBSF"
FIELD_VERSION = 1


class FieldFormatError(ValueError):
    pass


class GaussianModeBank:
    """M diagonal Gaussians over 2D displacements."""

    def __init__(self, alpha, sigma):
        alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if alpha.shape != sigma.shape or alpha.shape[1] != 2:
            raise ValueError(f"alpha/sigma must both be (M, 2), got {alpha.shape} and {sigma.shape}")
        if alpha.shape[0] < 1:
            raise ValueError("mode bank needs at least one mode")
        if not np.all(sigma > 0):
            raise ValueError("sigma must be positive")
        d = np.abs(alpha[:, None, :] - alpha[None, :, :]).max(axis=2)
        np.fill_diagonal(d, np.inf)
        if np.any(d < 1e-6):
            raise ValueError("duplicate mode means")
        self.alpha = alpha
        self.sigma = sigma

    @property
    def M(self) -> int:
        return self.alpha.shape[0]

    def pdf(self, x) -> np.ndarray:
        """(n, M) Gaussian densities N(x - alpha_m; sigma_m)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = (x[:, None, :] - self.alpha[None]) / self.sigma[None]
        norm = 2.0 * np.pi * self.sigma[:, 0] * self.sigma[:, 1]
        return np.exp(-0.5 * (z ** 2).sum(axis=2)) / norm[None]

    def log_pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = (x[:, None, :] - self.alpha[None]) / self.sigma[None]
        lognorm = np.log(2.0 * np.pi * self.sigma[:, 0] * self.sigma[:, 1])
        return -0.5 * (z ** 2).sum(axis=2) - lognorm[None]

    def assign(self, x) -> np.ndarray:
        """Index of the maximum-responsibility mode for each displacement."""
        return np.argmax(self.log_pdf(x), axis=1)

    def boxes(self) -> np.ndarray:
        """(M, 4) inference boxes (x0, y0, x1, y1), see :func:`mode_box`."""
        lo = np.clip(self.alpha - 3.0 * self.sigma, -0.5, 0.5)
        hi = np.clip(self.alpha + 3.0 * self.sigma, -0.5, 0.5)
        return np.concatenate([lo, hi], axis=1)

    def __repr__(self):
        return f"GaussianModeBank(M={self.M})"


class FlatModeBank(GaussianModeBank):
    """Single mode with a density of 1 on [-0.5, 0.5]^2 and 0 outside.

    Reduces the displacement model to a plain foreground/background model.
    """

    def __init__(self):
        super().__init__([[0.0, 0.0]], [[1.0 / np.sqrt(12.0)] * 2])

    def pdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.all(np.abs(x) <= 0.5, axis=1)
        return inside[:, None].astype(float)

    def log_pdf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    def assign(self, x):
        return np.zeros(np.atleast_2d(x).shape[0], dtype=np.int64)

    def boxes(self):
        return np.array([[-0.5, -0.5, 0.5, 0.5]])


@dataclass(frozen=True)
class ModeBox:
    lo: tuple
    hi: tuple

    @property
    def empty(self) -> bool:
        return self.lo[0] > self.hi[0] or self.lo[1] > self.hi[1]

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return ((x[:, 0] >= self.lo[0]) & (x[:, 0] <= self.hi[0])
                & (x[:, 1] >= self.lo[1]) & (x[:, 1] <= self.hi[1]))

    def area(self) -> float:
        if self.empty:
            return 0.0
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])


def mode_box(bank: GaussianModeBank, m: int) -> ModeBox:
    """Box of center alpha_m and half-size 3 sigma_m, clipped to [-0.5, 0.5]^2."""
    if not 0 <= m < bank.M:
        raise IndexError(m)
    x0, y0, x1, y1 = bank.boxes()[m]
    return ModeBox((float(x0), float(y0)), (float(x1), float(y1)))


def box_iou(a: ModeBox, b: ModeBox) -> float:
    ix = min(a.hi[0], b.hi[0]) - max(a.lo[0], b.lo[0])
    iy = min(a.hi[1], b.hi[1]) - max(a.lo[1], b.lo[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


class ObservationField:
    """Background probability and mode weights for every pixel of a camera.

    Arrays are float32, ``f_b`` of shape (H, W) and ``f_h`` of shape (M, H, W).
    """

    def __init__(self, f_b, f_h, camera: int = 0, check: bool = True):
        self.f_b = np.ascontiguousarray(f_b, dtype=np.float32)
        self.f_h = np.ascontiguousarray(f_h, dtype=np.float32)
        self.camera = int(camera)
        if self.f_h.ndim != 3 or self.f_h.shape[1:] != self.f_b.shape:
            raise ValueError(f"f_h must be (M, H, W) matching f_b {self.f_b.shape}, got {self.f_h.shape}")
        if check:
            self.check()

    @property
    def M(self) -> int:
        return self.f_h.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.f_b.shape

    def check(self, tol: float = 1e-6):
        if np.any(self.f_b < 0) or np.any(self.f_h < 0) or np.any(self.f_b > 1):
            raise ValueError("field probabilities must lie in [0, 1]")
        total = self.f_b.astype(float) + self.f_h.astype(float).sum(axis=0)
        err = np.abs(total - 1.0).max() if total.size else 0.0
        if err > tol:
            raise ValueError(f"field is not normalized (max deviation {err:.3g})")

    def mode_weights(self) -> np.ndarray:
        """f_h renormalized over modes, (M, H, W); zero where f_h is all zero."""
        fh = self.f_h.astype(float)
        s = fh.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(s > 0, fh / s, 0.0)
        return w

    def __eq__(self, other):
        return (isinstance(other, ObservationField) and np.array_equal(self.f_b, other.f_b)
                and np.array_equal(self.f_h, other.f_h))


def uniform_field(shape, M: int, camera: int = 0) -> ObservationField:
    H, W = shape
    v = 1.0 / (M + 1)
    return ObservationField(np.full((H, W), v), np.full((M, H, W), v), camera)


def density_at(field: ObservationField, bank: GaussianModeBank, k, x) -> float:
    """P^d at pixel ``k = (kx, ky)`` for observation ``x`` (None is background)."""
    kx, ky = int(k[0]), int(k[1])
    fb = float(field.f_b[ky, kx])
    fh = field.f_h[:, ky, kx].astype(float)
    if abs(fb + fh.sum() - 1.0) > 1e-5:
        raise ValueError(f"field not normalized at pixel {k}")
    if x is None:
        return fb
    s = fh.sum()
    if s <= 0:
        return 0.0
    return float((1.0 - fb) * (fh / s) @ bank.pdf(x)[0])


def pair_densities(field: ObservationField, bank: GaussianModeBank, pix, x) -> np.ndarray:
    """Foreground density at flat pixels ``pix`` for displacements ``x`` (P, 2)."""
    if len(pix) == 0:
        return np.zeros(0)
    H, W = field.shape
    fb = field.f_b.reshape(-1).astype(float)[pix]
    w = field.mode_weights().reshape(field.M, -1)[:, pix].T
    return (1.0 - fb) * np.einsum("pm,pm->p", w, bank.pdf(x))


@dataclass
class BinaryField:
    background: np.ndarray   # (H, W) bool
    active: np.ndarray       # (M, H, W) bool
    tau_b: float
    tau_h: float

    @property
    def shape(self):
        return self.background.shape

    @property
    def M(self):
        return self.active.shape[0]

    def foreground(self) -> np.ndarray:
        """Pixels with at least one active mode."""
        return self.active.any(axis=0)

    def background_only(self) -> np.ndarray:
        """Background-compatible pixels without any active mode."""
        return self.background & ~self.foreground()


def threshold_field(field: ObservationField, tau_b: float, tau_h: float) -> BinaryField:
    if not (0 < tau_b < 1 and 0 < tau_h < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    return BinaryField(field.f_b >= np.float32(tau_b), field.f_h >= np.float32(tau_h),
                       float(tau_b), float(tau_h))


def simple_binary_field(field: ObservationField, tau_b: float, tau_h: float) -> BinaryField:
    """Foreground/background thresholding that ignores displacement modes.

    A pixel is active on a single mode when its total foreground mass reaches
    ``tau_h``; pair with :class:`FlatModeBank` for compatible explanations.
    """
    fg = (1.0 - field.f_b.astype(float)) >= tau_h
    return BinaryField(field.f_b >= np.float32(tau_b), fg[None], float(tau_b), float(tau_h))


def default_threshold(o: float, noise: float, M: int) -> float:
    """Half the expected peak weight of an oracle field."""
    return 0.5 * ((1.0 - noise) * o + noise / (M + 1))


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_field(field: ObservationField) -> bytes:
    H, W = field.shape
    head = FIELD_MAGIC + struct.pack("<HIII", FIELD_VERSION, H, W, field.M)
    body = field.f_b.astype("<f4").tobytes() + field.f_h.astype("<f4").tobytes()
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_field(data: bytes, camera: int = 0) -> ObservationField:
    if len(data) < 18 + 4:
        raise FieldFormatError("truncated field file")
    if data[:4] != FIELD_MAGIC:
        raise FieldFormatError("bad magic")
    version, H, W, M = struct.unpack("<HIII", data[4:18])
    if version != FIELD_VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    n = H * W * (M + 1) * 4
    if len(data) != 18 + n + 4:
        raise FieldFormatError(f"size mismatch: expected {18 + n + 4} bytes, got {len(data)}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FieldFormatError("checksum mismatch")
    planes = np.frombuffer(data, dtype="<f4", count=H * W * (M + 1), offset=18)
    planes = planes.reshape(M + 1, H, W).astype(np.float32)
    return ObservationField(planes[0], planes[1:], camera, check=False)


def store_field(field: ObservationField, path):
    _atomic_write(path, encode_field(field))


def load_field(path, camera: int = 0) -> ObservationField:
    with open(path, "rb") as fh:
        return decode_field(fh.read(), camera)
