"""Escape-time images of 2-plane slices, written as binary PPM (P6).

Pixels are computed in fixed 16-row tiles.  The tile grid does not depend
on the number of workers, so every tile sees the same batch of points and
the output bytes are identical for any worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import DomainError, MapParams
from .dynamics import escape_times

TILE_ROWS = 16
ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class SliceSpec:
    """Pixel grid on the plane ``origin + a * axis_u + b * axis_v``.

    Pixel ``(i, j)`` (row ``i`` from the top) sits at
    ``a = (j - width // 2) * scale`` and ``b = (height // 2 - i) * scale``.
    """

    origin: tuple
    axis_u: tuple
    axis_v: tuple
    width: int
    height: int
    scale: float
    kmax: int = 100
    bailout: float = 1e6

    def __post_init__(self):
        for name in ("origin", "axis_u", "axis_v"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        d = len(self.origin)
        if d < 2 or len(self.axis_u) != d or len(self.axis_v) != d:
            raise DomainError("origin and axes must share one dimension d >= 2")
        u, v = np.array(self.axis_u), np.array(self.axis_v)
        if abs(u @ u - 1) > ORTHO_TOL or abs(v @ v - 1) > ORTHO_TOL or abs(u @ v) > ORTHO_TOL:
            raise DomainError("axis_u and axis_v must be orthonormal")
        if self.width < 1 or self.height < 1:
            raise DomainError("image must have at least one pixel")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DomainError("scale must be positive")
        if self.kmax < 1 or not self.bailout > 0:
            raise DomainError("kmax and bailout must be positive")

    @property
    def d(self) -> int:
        return len(self.origin)

    @classmethod
    def coordinate_plane(cls, d: int, i: int, j: int, width: int, height: int, scale: float,
                         center=None, **kw) -> "SliceSpec":
        """Slice spanned by the coordinate axes ``i`` and ``j`` (0-based)."""
        e = np.eye(d)
        origin = np.zeros(d) if center is None else np.asarray(center, dtype=float)
        return cls(tuple(origin), tuple(e[i]), tuple(e[j]), width, height, scale, **kw)

    def pixel_points(self, rows) -> np.ndarray:
        """Points of the given rows, row-major, shape ``(len(rows) * width, d)``."""
        rows = np.asarray(rows)
        a = (np.arange(self.width) - self.width // 2) * self.scale
        b = (self.height // 2 - rows) * self.scale
        A = np.tile(a, rows.size)[:, None]
        B = np.repeat(b, self.width)[:, None]
        return np.array(self.origin) + A * np.array(self.axis_u) + B * np.array(self.axis_v)


def palette(k: np.ndarray, kmax: int) -> np.ndarray:
    """RGB bytes for escape times; every channel is non-increasing in ``k``.

    The sentinel ``kmax + 1`` (no escape seen) is black; all other colours
    keep a blue floor, so they never coincide with it.
    """
    k = np.asarray(k)
    v = 1.0 - np.sqrt(np.minimum(k, kmax) / (kmax + 1.0))
    rgb = np.stack([255.0 * v, 255.0 * v * v, 96.0 + 159.0 * v], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[k > kmax] = 0
    return rgb


def _tile(args):
    s, p, r0 = args
    rows = range(r0, min(r0 + TILE_ROWS, s.height))
    return escape_times(s.pixel_points(rows), s.kmax, s.bailout, p)


def escape_image(s: SliceSpec, p: MapParams, workers: int = 1) -> np.ndarray:
    """Escape times as an ``(height, width)`` integer array."""
    if s.d != p.d:
        raise DomainError(f"slice lives in R^{s.d}, map in R^{p.d}")
    jobs = [(s, p, r0) for r0 in range(0, s.height, TILE_ROWS)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_tile, jobs))
    else:
        parts = [_tile(j) for j in jobs]
    return np.concatenate(parts).reshape(s.height, s.width)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def render_slice(s: SliceSpec, p: MapParams, path=None, workers: int = 1) -> bytes:
    """Binary PPM of the slice; also written to ``path`` when given."""
    data = encode_ppm(palette(escape_image(s, p, workers), s.kmax))
    if path is not None:
        try:
            with open(path, "wb") as fh:
                fh.write(data)
        except OSError as exc:
            raise OSError(f"cannot write image to {os.fspath(path)}: {exc.strerror or exc}") from exc
    return data
