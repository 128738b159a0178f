"""Quantitative harness: embedding similarity, Fréchet-style crop
distribution distance over descriptors, seam metrics, and the least-squares
oracle the acceptance suite checks the fusion update against."""

import json
from dataclasses import dataclass

import numpy as np

from .conditioning import compute_descriptor, extract_embedding
from .errors import ConfigurationError, ContractViolation, NumericError


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int


def fit_stats(features):
    """Mean and covariance of row features, deterministic summation order."""
    feats = np.asarray(features, dtype=np.float64)
    n, d = feats.shape
    if n < 2:
        raise ConfigurationError(f"need at least 2 samples, got {n}")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, covariance=cov, count=n)


def area_downsample(canvas, target_h, target_w):
    """Block-average resize; source extents must be divisible."""
    data = np.asarray(canvas, dtype=np.float64)
    h, w = data.shape[:2]
    if h % target_h != 0 or w % target_w != 0:
        raise ConfigurationError(
            f"canvas {h}x{w} not divisible by target {target_h}x{target_w}")
    fh, fw = h // target_h, w // target_w
    return data.reshape(target_h, fh, target_w, fw, -1).mean(axis=(1, 3))


def embedding_similarity(reference, generated, patch_size=32):
    """Cosine similarity between whole-canvas embeddings after an
    area-average resize to patch size."""
    ref = np.asarray(reference)
    gen = np.asarray(generated)
    if ref.shape != gen.shape:
        raise ContractViolation(
            f"geometry mismatch {ref.shape} vs {gen.shape}")
    a = extract_embedding(area_downsample(ref, patch_size, patch_size)).values
    b = extract_embedding(area_downsample(gen, patch_size, patch_size)).values
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _psd_sqrt(mat, tol=1e-8):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() < -tol * max(abs(vals).max(), 1.0):
        raise NumericError(
            f"matrix not PSD within tolerance (min eigenvalue {vals.min()})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})."""
    if a.mean.shape != b.mean.shape:
        raise ContractViolation(
            f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sa_half = _psd_sqrt(a.covariance)
    inner = _psd_sqrt(sa_half @ b.covariance @ sa_half)
    val = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance)
                - 2.0 * np.trace(inner))
    return max(val, 0.0)


def _crop_features(canvases, positions, crop):
    feats = []
    for canvas in canvases:
        data = np.asarray(canvas)
        for i, j in positions:
            cell = data[i:i + crop, j:j + crop]
            feats.append(extract_embedding(cell).values.astype(np.float64))
    return np.asarray(feats)


def crop_distribution_distance(real_set, gen_set, crop, crops_per_canvas=16,
                               seed=0):
    """Fréchet distance between descriptor distributions of random crops.

    The crop positions are drawn once from the seed and shared across all
    canvases, so the result is invariant to canvas ordering within a set.
    """
    if not real_set or not gen_set:
        raise ConfigurationError("both canvas sets must be non-empty")
    h, w = np.asarray(real_set[0]).shape[:2]
    if crop > h or crop > w:
        raise ConfigurationError(f"crop {crop} does not fit in {h}x{w}")
    rng = np.random.default_rng(seed)
    positions = [(int(rng.integers(0, h - crop + 1)),
                  int(rng.integers(0, w - crop + 1)))
                 for _ in range(crops_per_canvas)]
    feats_real = _crop_features(real_set, positions, crop)
    feats_gen = _crop_features(gen_set, positions, crop)
    d = feats_real.shape[1]
    if feats_real.shape[0] <= d or feats_gen.shape[0] <= d:
        raise ConfigurationError(
            f"need more than {d} crops per set for covariance estimation")
    return frechet_distance(fit_stats(feats_real), fit_stats(feats_gen))


def seam_metric(canvas, period):
    """Ratio of mean absolute gradient at period boundaries to elsewhere."""
    data = np.asarray(canvas, dtype=np.float64)
    h, w = data.shape[:2]
    if period < 2 or h % period != 0 or w % period != 0:
        raise ContractViolation(
            f"period {period} must divide canvas {h}x{w}")
    gcol = np.abs(np.diff(data, axis=1)).mean(axis=(0, 2))  # (w-1,) at col j->j+1
    grow = np.abs(np.diff(data, axis=0)).mean(axis=(1, 2))
    col_idx = np.arange(1, w) % period == 0  # gradient crossing col multiple
    row_idx = np.arange(1, h) % period == 0
    seam = np.concatenate([gcol[col_idx], grow[row_idx]])
    rest = np.concatenate([gcol[~col_idx], grow[~row_idx]])
    rest_mean = rest.mean()
    if rest_mean < 1e-12:
        return float("inf") if seam.mean() > 1e-12 else 1.0
    return float(seam.mean() / rest_mean)


def solve_fusion_least_squares(plan, updates):
    """Sparse least-squares solution of the fusion objective, independent of
    the closed-form averaging path. `updates` is (num_anchors, ph, pw, c)."""
    from scipy.sparse import lil_matrix
    from scipy.sparse.linalg import lsqr

    ph, pw = plan.patch_h, plan.patch_w
    h, w = plan.canvas_h, plan.canvas_w
    c = updates.shape[3]
    k = len(plan.positions)
    sqrt_w = np.sqrt(plan.window)
    rows = k * ph * pw
    mat = lil_matrix((rows, h * w))
    row = 0
    for (ai, aj) in plan.positions:
        for y in range(ph):
            for x in range(pw):
                mat[row, (ai + y) * w + (aj + x)] = sqrt_w[y, x]
                row += 1
    mat = mat.tocsr()
    out = np.zeros((h, w, c))
    for ch in range(c):
        b = np.concatenate([
            (sqrt_w * updates[n, :, :, ch]).ravel() for n in range(k)
        ])
        sol = lsqr(mat, b, atol=1e-14, btol=1e-14, iter_lim=20000)[0]
        out[:, :, ch] = sol.reshape(h, w)
    return out


def fusion_objective(plan, updates, canvas):
    """Value of the weighted least-squares objective at a candidate canvas."""
    total = 0.0
    for n, (ai, aj) in enumerate(plan.positions):
        crop = canvas[ai:ai + plan.patch_h, aj:aj + plan.patch_w]
        diff = crop - updates[n]
        total += float(np.sum(plan.window[:, :, None] * diff * diff))
    return total


def write_report(path, metrics):
    """key=value lines plus a machine-readable JSON sidecar."""
    with open(path, "w") as fh:
        for key in sorted(metrics):
            fh.write(f"{key}={metrics[key]}\n")
    with open(str(path) + ".json", "w") as fh:
        json.dump({k: metrics[k] for k in sorted(metrics)}, fh, indent=2)
        fh.write("\n")


def read_report(path):
    metrics = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, val = line.strip().split("=", 1)
                try:
                    metrics[key] = float(val)
                except ValueError:
                    metrics[key] = val
    return metrics
