"""Procedural texture world: labeled patches and composite reference
canvases, reproducible from seeds, for exercising the whole pipeline."""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .conditioning import extract_embedding
from .errors import ConfigurationError

FAMILIES = ("stripes", "dots", "checker", "noise")


@dataclass(frozen=True)
class TextureSpec:
    family: str
    orientation: float = 0.0  # radians
    frequency: float = 4.0  # cycles per patch extent
    palette: tuple = ((-0.8, -0.8, -0.8), (0.8, 0.8, 0.8))
    octaves: int = 3
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)


def _mix(palette, s):
    # s in [0,1] -> linear blend between the two palette colors
    c0 = np.asarray(palette[0], dtype=np.float64)
    c1 = np.asarray(palette[1], dtype=np.float64)
    return c0[None, None, :] + s[..., None] * (c1 - c0)[None, None, :]


def _value_noise(spec, yy, xx, extent):
    total = np.zeros_like(yy, dtype=np.float64)
    amp_sum = 0.0
    for octv in range(max(spec.octaves, 1)):
        cells = 2 ** (octv + 1)
        rng = np.random.default_rng((spec.seed, octv, 7919))
        lattice = rng.random((cells + 2, cells + 2))
        fy = yy / extent * cells
        fx = xx / extent * cells
        y0 = np.floor(fy).astype(np.int64)
        x0 = np.floor(fx).astype(np.int64)
        ty = fy - y0
        tx = fx - x0
        y0 = np.mod(y0, cells)
        x0 = np.mod(x0, cells)
        v00 = lattice[y0, x0]
        v01 = lattice[y0, x0 + 1]
        v10 = lattice[y0 + 1, x0]
        v11 = lattice[y0 + 1, x0 + 1]
        amp = 0.5 ** octv
        total += amp * ((1 - ty) * ((1 - tx) * v00 + tx * v01)
                        + ty * ((1 - tx) * v10 + tx * v11))
        amp_sum += amp
    return total / amp_sum


def _pattern(spec, yy, xx, extent):
    if spec.family == "stripes":
        u = (xx * np.cos(spec.orientation) + yy * np.sin(spec.orientation))
        return 0.5 + 0.5 * np.cos(2 * np.pi * spec.frequency * u / extent)
    if spec.family == "dots":
        co, so = np.cos(spec.orientation), np.sin(spec.orientation)
        u = (xx * co + yy * so) / extent
        v = (-xx * so + yy * co) / extent
        su = 0.5 + 0.5 * np.cos(2 * np.pi * spec.frequency * u)
        sv = 0.5 + 0.5 * np.cos(2 * np.pi * spec.frequency * v)
        return (su * sv) ** 2
    if spec.family == "checker":
        iu = np.floor(xx * spec.frequency / extent).astype(np.int64)
        iv = np.floor(yy * spec.frequency / extent).astype(np.int64)
        return ((iu + iv) % 2).astype(np.float64)
    if spec.family == "noise":
        return _value_noise(spec, yy, xx, extent)
    raise ConfigurationError(f"unknown texture family {spec.family!r}")


def render_region(spec, ys, xs, extent):
    """Render the texture over explicit global pixel coordinates."""
    yy, xx = np.meshgrid(np.asarray(ys, dtype=np.float64),
                         np.asarray(xs, dtype=np.float64), indexing="ij")
    s = _pattern(spec, yy, xx, float(extent))
    return np.clip(_mix(spec.palette, s), -1.0, 1.0).astype(np.float32)


def render_patch(spec, h, w):
    """Deterministic patch render in the [-1, 1] value range."""
    return render_region(spec, np.arange(h), np.arange(w), w)


def render_scene(layout, cell_h, cell_w, blend_margin=0):
    """Render a grid of texture cells, cross-faded over blend_margin pixels."""
    layout = [list(row) for row in layout]
    if not layout or not layout[0]:
        raise ConfigurationError("empty scene layout")
    rows = len(layout)
    cols = len(layout[0])
    if blend_margin >= min(cell_h, cell_w):
        raise ConfigurationError(
            f"blend_margin {blend_margin} must be smaller than cell "
            f"{cell_h}x{cell_w}")
    h, w = rows * cell_h, cols * cell_w
    acc = np.zeros((h, w, 3), dtype=np.float64)
    wacc = np.zeros((h, w), dtype=np.float64)
    m = blend_margin

    def ramp(idx, lo, hi, full_lo, full_hi):
        # trapezoid weight: 1 in the core cell, linear falloff over m
        wgt = np.ones_like(idx, dtype=np.float64)
        if m > 0:
            if lo > full_lo:
                wgt = np.minimum(wgt, np.clip((idx - (lo - m)) / (2 * m), 0, 1))
            if hi < full_hi:
                wgt = np.minimum(wgt, np.clip(((hi + m) - idx - 1) / (2 * m), 0, 1))
        return wgt

    for r in range(rows):
        for c in range(cols):
            y0, y1 = r * cell_h, (r + 1) * cell_h
            x0, x1 = c * cell_w, (c + 1) * cell_w
            ey0, ey1 = max(y0 - m, 0), min(y1 + m, h)
            ex0, ex1 = max(x0 - m, 0), min(x1 + m, w)
            ys = np.arange(ey0, ey1)
            xs = np.arange(ex0, ex1)
            tile = render_region(layout[r][c], ys - y0, xs - x0, cell_w)
            wy = ramp(ys, y0, y1, 0, h)
            wx = ramp(xs, x0, x1, 0, w)
            wgt = wy[:, None] * wx[None, :]
            acc[ey0:ey1, ex0:ex1] += wgt[:, :, None] * tile
            wacc[ey0:ey1, ex0:ex1] += wgt
    return (acc / wacc[:, :, None]).astype(np.float32)


def random_spec(family, rng):
    """Random texture spec with continuous nuisance parameters."""
    hue = rng.random(3)
    c0 = tuple((-0.9 + 0.5 * hue).round(4))
    c1 = tuple((0.9 - 0.5 * rng.random(3)).round(4))
    return TextureSpec(
        family=family,
        orientation=float(rng.uniform(0, np.pi)),
        frequency=float(rng.uniform(3.0, 6.0)),
        palette=(c0, c1),
        octaves=3,
        seed=int(rng.integers(0, 2 ** 31)),
    )


def make_dataset(n, families=FAMILIES, seed=0, h=32, w=32):
    """Stream (patch, embedding, label) triples, reproducible from seed."""
    if n < 1:
        raise ConfigurationError(f"dataset size must be >= 1, got {n}")
    families = tuple(families)
    for k in range(n):
        rng = np.random.default_rng((seed, k))
        label = k % len(families)
        spec = random_spec(families[label], rng)
        patch = render_patch(spec, h, w)
        yield patch, extract_embedding(patch), label


def write_manifest(path, n, families=FAMILIES, seed=0, h=32, w=32):
    """Manifest of (spec, seed, label) triples, one JSON object per line."""
    families = tuple(families)
    with open(path, "w") as fh:
        fh.write(json.dumps({"n": n, "families": list(families),
                             "seed": seed, "h": h, "w": w}) + "\n")
        for k in range(n):
            rng = np.random.default_rng((seed, k))
            label = k % len(families)
            spec = random_spec(families[label], rng)
            fh.write(json.dumps({"label": label, "spec": spec.to_dict()}) + "\n")


def read_manifest(path):
    """Yield (patch, embedding, label) triples from a manifest file."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        h, w = header["h"], header["w"]
        for line in fh:
            row = json.loads(line)
            spec = TextureSpec.from_dict(row["spec"])
            patch = render_patch(spec, h, w)
            yield patch, extract_embedding(patch), row["label"]
