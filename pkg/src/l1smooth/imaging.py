"""Image-sequence helpers: TV operator, parallel-beam projector, phantoms and I/O.

Images are ``s x s`` arrays vectorized row-major. The pixel grid covers the
square ``[-s/2, s/2]^2`` with unit pixels; row 0 is the top row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

Array = np.ndarray
MAGIC = b"L1SM"


def tv_operator(s: int) -> sp.csr_matrix:
    """One-step differences: all horizontal pairs first, then all vertical pairs."""
    if s < 2:
        raise ValueError("tv_operator needs s >= 2")
    idx = np.arange(s * s).reshape(s, s)
    left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    top, bottom = idx[:-1, :].ravel(), idx[1:, :].ravel()
    minus = np.concatenate([left, top])
    plus = np.concatenate([right, bottom])
    rows = np.arange(minus.size)
    data = np.concatenate([np.ones(rows.size), -np.ones(rows.size)])
    return sp.csr_matrix((data, (np.concatenate([rows, rows]), np.concatenate([plus, minus]))),
                         shape=(rows.size, s * s))


@dataclass(frozen=True)
class Projector:
    """Ray-by-pixel intersection lengths, plus the ray geometry."""

    matrix: sp.csr_matrix
    angles: Array
    offsets: Array
    empty_rows: tuple

    @property
    def shape(self):
        return self.matrix.shape


def _ray_row(s: int, theta: float, offset: float, tol: float = 1e-12):
    """Pixel indices and chord lengths for one ray, by walking grid crossings."""
    n = np.array([np.cos(theta), np.sin(theta)])
    d = np.array([-np.sin(theta), np.cos(theta)])
    p0 = offset * n
    half = s / 2.0
    # entry and exit parameters of the square
    lo, hi = -np.inf, np.inf
    for k in range(2):
        if abs(d[k]) < tol:
            if abs(p0[k]) >= half:
                return np.zeros(0, int), np.zeros(0)
            continue
        a, b = (-half - p0[k]) / d[k], (half - p0[k]) / d[k]
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    if hi - lo <= tol:
        return np.zeros(0, int), np.zeros(0)
    params = [np.array([lo, hi])]
    lines = np.arange(-half, half + 1.0)
    for k in range(2):
        if abs(d[k]) >= tol:
            lam = (lines - p0[k]) / d[k]
            params.append(lam[(lam > lo) & (lam < hi)])
    lam = np.unique(np.concatenate(params))
    seg = np.diff(lam)
    keep = seg > tol
    mid = 0.5 * (lam[:-1] + lam[1:])[keep]
    seg = seg[keep]
    px = p0[0] + mid * d[0]
    py = p0[1] + mid * d[1]
    col = np.clip(np.floor(px + half).astype(int), 0, s - 1)
    row = np.clip(np.floor(half - py).astype(int), 0, s - 1)
    pix = row * s + col
    return pix, seg


def radon_matrix(s: int, n_angles: int, n_detectors: Optional[int] = None,
                 angles: Optional[Sequence[float]] = None,
                 offsets: Optional[Sequence[float]] = None) -> Projector:
    """Parallel-beam projector for an ``s x s`` image.

    Angles default to ``n_angles`` values spaced uniformly in ``[0, pi)``.
    Each angle has ``n_detectors`` parallel rays (default ``ceil(s sqrt 2)``)
    whose signed distances from the center sit at bin centers across the
    image diagonal. Ray ``(theta, r)`` is the line ``{p : p . (cos theta,
    sin theta) = r}``. Rows are ordered angle-major.
    """
    if s < 1 or n_angles < 1:
        raise ValueError("s and n_angles must be >= 1")
    if angles is None:
        angles = np.arange(n_angles) * np.pi / n_angles
    angles = np.asarray(angles, dtype=float)
    if offsets is None:
        nd = int(np.ceil(s * np.sqrt(2))) if n_detectors is None else int(n_detectors)
        if nd < 1:
            raise ValueError("n_detectors must be >= 1")
        diag = s * np.sqrt(2)
        offsets = -diag / 2 + (np.arange(nd) + 0.5) * diag / nd
    offsets = np.asarray(offsets, dtype=float)
    rows, cols, vals, empty = [], [], [], []
    r = 0
    for th in angles:
        for off in offsets:
            pix, seg = _ray_row(s, th, off)
            if pix.size == 0:
                empty.append(r)
            rows.append(np.full(pix.size, r))
            cols.append(pix)
            vals.append(seg)
            r += 1
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(r, s * s))
    M.sum_duplicates()
    return Projector(M, angles, offsets, tuple(empty))


# image sequences ------------------------------------------------------------


@dataclass
class ImageSequence:
    """``T`` frames of ``s x s`` pixels stored as a ``(T, s*s)`` array."""

    s: int
    frames: Array

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float).reshape(-1, self.s * self.s)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def image(self, t: int) -> Array:
        return self.frames[t].reshape(self.s, self.s)

    @classmethod
    def from_images(cls, images: Sequence[Array]) -> "ImageSequence":
        images = [np.asarray(im, dtype=float) for im in images]
        return cls(images[0].shape[0], np.stack([im.ravel() for im in images]))

    # binary blob: magic, s and T as int32 LE, then float64 LE row-major frames
    def to_blob(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<ii", self.s, self.T))
            fh.write(np.ascontiguousarray(self.frames, dtype="<f8").tobytes())

    @classmethod
    def from_blob(cls, path) -> "ImageSequence":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError("not an image-sequence blob (bad magic)")
        s, T = struct.unpack("<ii", raw[4:12])
        data = np.frombuffer(raw[12:], dtype="<f8")
        if data.size != s * s * T:
            raise ValueError(f"blob holds {data.size} values, expected {s * s * T}")
        return cls(s, data.reshape(T, s * s).astype(float))

    def to_csv_dir(self, directory, prefix: str = "frame") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for t in range(self.T):
            p = directory / f"{prefix}_{t:04d}.csv"
            np.savetxt(p, self.image(t), delimiter=",", fmt="%.17g")
            paths.append(p)
        return paths

    @classmethod
    def from_csv_dir(cls, directory, prefix: str = "frame") -> "ImageSequence":
        paths = sorted(Path(directory).glob(f"{prefix}_*.csv"))
        if not paths:
            raise FileNotFoundError(f"no {prefix}_*.csv files in {directory}")
        return cls.from_images([np.loadtxt(p, delimiter=",", ndmin=2) for p in paths])

    def write_pgm(self, path, t: int) -> None:
        """8-bit binary PGM of frame `t`, values clipped to [0, 1]."""
        img = np.clip(self.image(t), 0.0, 1.0)
        data = np.round(img * 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{self.s} {self.s}\n255\n".encode())
            fh.write(data.tobytes())


def phantom_sequence(s: int, T: int, seed: int = 0, n_shapes: int = 4) -> ImageSequence:
    """Piecewise-constant disks and rectangles drifting smoothly over time.

    A faint background disk fills most of the field; the other shapes have
    random sizes, intensities and sinusoidal motion paths.
    """
    if s < 8:
        raise ValueError("phantom_sequence needs s >= 8")
    rng = np.random.default_rng(seed)
    c = (np.arange(s) + 0.5) / s - 0.5
    X, Y = np.meshgrid(c, -c)
    shapes = []
    for i in range(n_shapes):
        shapes.append(dict(
            kind="disk" if i % 2 == 0 else "rect",
            center=rng.uniform(-0.22, 0.22, 2),
            size=rng.uniform(0.08, 0.18, 2),
            value=rng.uniform(0.3, 0.6),
            amp=rng.uniform(0.03, 0.1, 2),
            phase=rng.uniform(0, 2 * np.pi, 2),
            grow=rng.uniform(-0.2, 0.2),
        ))
    frames = np.empty((T, s * s))
    for t in range(T):
        u = t / max(T - 1, 1)
        img = np.where(X ** 2 + Y ** 2 <= 0.42 ** 2, 0.15, 0.0)
        for sh in shapes:
            cx, cy = sh["center"] + sh["amp"] * np.sin(2 * np.pi * u + sh["phase"])
            a, b = sh["size"] * (1 + sh["grow"] * u)
            if sh["kind"] == "disk":
                mask = ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 <= 1
            else:
                mask = (np.abs(X - cx) <= a) & (np.abs(Y - cy) <= b)
            img = img + sh["value"] * mask
        frames[t] = np.clip(img, 0.0, 1.0).ravel()
    return ImageSequence(s, frames)


def total_variation(image: Array) -> float:
    im = np.asarray(image, dtype=float)
    return float(np.abs(np.diff(im, axis=0)).sum() + np.abs(np.diff(im, axis=1)).sum())
