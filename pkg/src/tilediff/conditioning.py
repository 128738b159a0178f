"""Deterministic patch descriptors, embedding grids, and the spatial
interpolation map from canvas positions to conditioning vectors."""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError

DESCRIPTOR_DIM = 32

# (u, v) DCT coefficient indices in zigzag order, DC excluded
_DCT_INDICES = [
    (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (0, 3), (1, 2), (2, 1), (3, 0),
    (4, 0), (3, 1), (2, 2), (1, 3), (0, 4), (0, 5), (1, 4), (2, 3), (3, 2),
]

# relative weight of each descriptor group: mean color, color spread,
# gradient-orientation histogram, low-frequency DCT magnitudes
_W_COLOR = 1.0
_W_SPREAD = 1.0
_W_GRAD = 0.5
_W_DCT = 0.5


@dataclass(frozen=True)
class ConditionVector:
    """Unit-norm conditioning vector; the null token is all zeros."""

    values: np.ndarray
    is_null: bool = False

    @classmethod
    def null(cls, dim):
        return cls(values=np.zeros(dim, dtype=np.float32), is_null=True)

    @classmethod
    def from_raw(cls, raw):
        raw = np.asarray(raw, dtype=np.float64)
        norm = np.linalg.norm(raw)
        if norm < 1e-12:
            raise ContractViolation(
                "zero vector is reserved for the null token; use "
                "ConditionVector.null()")
        return cls(values=(raw / norm).astype(np.float32), is_null=False)

    @property
    def dim(self):
        return self.values.shape[0]

    def null_like(self):
        return ConditionVector.null(self.dim)


@dataclass(frozen=True)
class EmbeddingGrid:
    """Spatial grid of unit-norm embeddings, one per canvas cell."""

    embeddings: np.ndarray  # (rows, cols, dim) float32
    cell_h: int
    cell_w: int

    @property
    def rows(self):
        return self.embeddings.shape[0]

    @property
    def cols(self):
        return self.embeddings.shape[1]

    @property
    def dim(self):
        return self.embeddings.shape[2]


@lru_cache(maxsize=8)
def _dct_matrix(n):
    # orthonormal DCT-II
    k = np.arange(n)
    mat = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    mat *= np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


def compute_descriptor(patch):
    """32-dim descriptor: mean color, per-channel spread,
    gradient-orientation histogram, low-frequency DCT magnitudes."""
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim != 3:
        raise ContractViolation(f"expected HxWxC patch, got shape {p.shape}")
    h, w, c = p.shape

    mean_color = p.mean(axis=(0, 1))
    spread = p.std(axis=(0, 1))

    gray = p.mean(axis=2)
    gy = np.zeros_like(gray)
    gx = np.zeros_like(gray)
    gy[1:-1, :] = 0.5 * (gray[2:, :] - gray[:-2, :])
    gx[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    mag = np.hypot(gx, gy)
    # orientation (mod pi) into 8 bins, magnitude weighted
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / np.pi * 8).astype(np.int64), 7)
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=8)[:8]
    hist /= h * w

    mat_h = _dct_matrix(h)
    mat_w = _dct_matrix(w)
    coef = mat_h @ gray @ mat_w.T
    dct = np.array([abs(coef[u, v]) for u, v in _DCT_INDICES])
    dct /= np.sqrt(h * w)

    out = np.concatenate([
        _W_COLOR * np.resize(mean_color, 3),
        _W_SPREAD * np.resize(spread, 3),
        _W_GRAD * hist,
        _W_DCT * dct,
    ])
    return out


def extract_embedding(patch):
    """Descriptor of the patch, L2-normalized into a ConditionVector."""
    desc = compute_descriptor(patch)
    norm = np.linalg.norm(desc)
    if norm < 1e-12:
        # degenerate constant patch: reserved indicator, never the null token
        desc = np.zeros(DESCRIPTOR_DIM)
        desc[-1] = 1.0
        return ConditionVector(values=desc.astype(np.float32), is_null=False)
    return ConditionVector.from_raw(desc)


def extract_grid(canvas, cell_h, cell_w):
    """Partition a canvas into non-overlapping cells, one embedding each."""
    data = np.asarray(canvas)
    h, w = data.shape[:2]
    if h % cell_h != 0 or w % cell_w != 0:
        raise ConfigurationError(
            f"canvas {h}x{w} not divisible by cell {cell_h}x{cell_w} "
            f"(remainders {h % cell_h}, {w % cell_w})")
    rows = h // cell_h
    cols = w // cell_w
    emb = np.empty((rows, cols, DESCRIPTOR_DIM), dtype=np.float32)
    for r in range(rows):
        for c in range(cols):
            cell = data[r * cell_h:(r + 1) * cell_h, c * cell_w:(c + 1) * cell_w]
            emb[r, c] = extract_embedding(cell).values
    return EmbeddingGrid(embeddings=emb, cell_h=cell_h, cell_w=cell_w)


def slerp(a, b, t):
    """Spherical linear interpolation between unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(np.dot(a, b))
    if dot < -1.0 + 1e-6:
        raise NumericError("slerp undefined for antipodal inputs")
    dot = min(dot, 1.0)
    omega = np.arccos(dot)
    if omega < 1e-4:
        out = (1.0 - t) * a + t * b
        return out / np.linalg.norm(out)
    s = np.sin(omega)
    return (np.sin((1.0 - t) * omega) / s) * a + (np.sin(t * omega) / s) * b


def interpolate_condition(grid, i, j):
    """Condition at canvas position (i, j) by two-stage slerp of the four
    nearest cell centers; clamped to edge cells outside the center hull."""
    if grid.rows == 0 or grid.cols == 0:
        raise ContractViolation("empty embedding grid")
    fi = np.clip(i / grid.cell_h - 0.5, 0.0, grid.rows - 1.0)
    fj = np.clip(j / grid.cell_w - 0.5, 0.0, grid.cols - 1.0)
    r0 = int(np.floor(fi))
    c0 = int(np.floor(fj))
    r1 = min(r0 + 1, grid.rows - 1)
    c1 = min(c0 + 1, grid.cols - 1)
    ti = fi - r0
    tj = fj - c0
    if ti == 0.0 and tj == 0.0:
        # exact cell center: hand back the stored embedding untouched
        return ConditionVector(values=grid.embeddings[r0, c0].copy(),
                               is_null=False)
    e = grid.embeddings.astype(np.float64)
    top = slerp(e[r0, c0], e[r0, c1], tj)
    bot = slerp(e[r1, c0], e[r1, c1], tj)
    out = slerp(top, bot, ti)
    out /= np.linalg.norm(out)
    return ConditionVector(values=out.astype(np.float32), is_null=False)


GRID_MAGIC = b"EMBG"
GRID_VERSION = 1


def save_grid(path, grid):
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<5I", GRID_VERSION, grid.rows, grid.cols,
                             grid.dim, grid.cell_h))
        fh.write(struct.pack("<I", grid.cell_w))
        fh.write(grid.embeddings.astype("<f4").tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRID_MAGIC:
            raise ConfigurationError(f"{path}: bad grid magic {magic!r}")
        version, rows, cols, dim, cell_h, cell_w = struct.unpack(
            "<6I", fh.read(24))
        if version != GRID_VERSION:
            raise ConfigurationError(f"{path}: unsupported grid version {version}")
        data = np.frombuffer(fh.read(rows * cols * dim * 4), dtype="<f4")
        if data.size != rows * cols * dim:
            raise ConfigurationError(f"{path}: truncated grid payload")
    emb = data.reshape(rows, cols, dim).copy()
    return EmbeddingGrid(embeddings=emb, cell_h=cell_h, cell_w=cell_w)
