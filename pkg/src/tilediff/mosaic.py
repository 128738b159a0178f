"""Tiled large-image diffusion: overlapping patch updates fused by a
weighted average, which is the closed-form minimizer of the per-patch
least-squares objective under the chosen window weights."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .conditioning import interpolate_condition
from .errors import ConfigurationError, ContractViolation, NumericError
from .schedule import cfg_combine, ddim_step, inference_timesteps


@dataclass(frozen=True)
class FusionPlan:
    positions: tuple  # ((i, j) top-left anchors, row-major)
    stride: int
    window: np.ndarray  # (patch_h, patch_w) float64, peak 1
    normalizer: np.ndarray  # (canvas_h, canvas_w) float64
    patch_h: int
    patch_w: int
    canvas_h: int
    canvas_w: int


def _axis_anchors(canvas, patch, stride):
    anchors = list(range(0, canvas - patch + 1, stride))
    last = canvas - patch
    if anchors[-1] != last:
        anchors.append(last)
    return anchors


def make_window(patch_h, patch_w, sigma):
    """Separable Gaussian patch window, peak-normalized to 1.

    sigma=inf gives the uniform all-ones window.
    """
    if not np.isfinite(sigma):
        return np.ones((patch_h, patch_w), dtype=np.float64)

    def axis(n):
        u = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        g = np.exp(-0.5 * (u / sigma) ** 2)
        return g / g.max()

    return np.outer(axis(patch_h), axis(patch_w))


def plan_fusion(canvas_h, canvas_w, patch_h, patch_w, stride, window_sigma=None):
    """Anchor lattice plus clamped final anchors; 64-bit weight normalizer."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if stride > min(patch_h, patch_w):
        raise ConfigurationError(
            f"stride {stride} exceeds patch size {patch_h}x{patch_w}: "
            "coverage gaps")
    if canvas_h < patch_h or canvas_w < patch_w:
        raise ConfigurationError(
            f"canvas {canvas_h}x{canvas_w} smaller than patch "
            f"{patch_h}x{patch_w}")
    if window_sigma is None:
        window_sigma = patch_h / 4.0
    window = make_window(patch_h, patch_w, window_sigma)
    positions = tuple(
        (i, j)
        for i in _axis_anchors(canvas_h, patch_h, stride)
        for j in _axis_anchors(canvas_w, patch_w, stride)
    )
    normalizer = np.zeros((canvas_h, canvas_w), dtype=np.float64)
    for i, j in positions:
        normalizer[i:i + patch_h, j:j + patch_w] += window
    return FusionPlan(positions=positions, stride=stride, window=window,
                      normalizer=normalizer, patch_h=patch_h, patch_w=patch_w,
                      canvas_h=canvas_h, canvas_w=canvas_w)


def project(canvas, anchor, patch_h, patch_w):
    """Crop the patch window at the anchor."""
    i, j = anchor
    h, w = canvas.shape[:2]
    if i < 0 or j < 0 or i + patch_h > h or j + patch_w > w:
        raise ContractViolation(f"anchor {anchor} out of bounds for {h}x{w}")
    return canvas[i:i + patch_h, j:j + patch_w].copy()


def unproject_accumulate(acc, wacc, anchor, patch, window):
    """Scatter a weighted patch back onto the 64-bit accumulators."""
    i, j = anchor
    ph, pw = patch.shape[:2]
    acc[i:i + ph, j:j + pw] += window[:, :, None] * patch
    wacc[i:i + ph, j:j + pw] += window


def _anchor_conditions(grid, plan):
    conds = []
    for i, j in plan.positions:
        cv = interpolate_condition(grid, i + plan.patch_h / 2.0,
                                   j + plan.patch_w / 2.0)
        conds.append(cv)
    return conds


def _eval_eps(model, patches, t, conds, guidance_weight, workers=1):
    """Guided epsilon for a stack of patches; deterministic in worker count."""
    k = patches.shape[0]
    if hasattr(model, "eps_batch"):
        d = model.d
        y = np.stack([
            np.zeros(d, dtype=np.float32) if cv.is_null else cv.values
            for cv in conds
        ])
        # normalization mirror of project_input_condition
        norms = np.linalg.norm(y.astype(np.float64), axis=1)
        nz = norms > 0
        y = y.astype(np.float64)
        y[nz] /= norms[nz, None]
        y = y.astype(np.float32)

        def run(batch_x, batch_y):
            return model.eps_batch(batch_x, t, batch_y)

        if workers > 1 and k > 1:
            chunks = np.array_split(np.arange(k), min(workers, k))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                eps_c = np.concatenate(list(pool.map(
                    lambda ix: run(patches[ix], y[ix]), chunks)))
                if guidance_weight != 1.0:
                    eps_u = np.concatenate(list(pool.map(
                        lambda ix: run(patches[ix], np.zeros_like(y[ix])), chunks)))
        else:
            eps_c = run(patches, y)
            if guidance_weight != 1.0:
                eps_u = run(patches, np.zeros_like(y))
    else:
        eps_c = np.stack([model.eps(patches[n], t, conds[n]) for n in range(k)])
        if guidance_weight != 1.0:
            null = conds[0].null_like()
            eps_u = np.stack([model.eps(patches[n], t, null) for n in range(k)])
    if guidance_weight == 1.0:
        return eps_c
    return cfg_combine(eps_c, eps_u, guidance_weight)


def fuse_step(canvas_t, grid, model, plan, t, t_prev, sched, cfg, workers=1,
              conds=None):
    """One fused DDIM step over all anchors of the plan."""
    if canvas_t.shape[:2] != (plan.canvas_h, plan.canvas_w):
        raise ContractViolation(
            f"canvas {canvas_t.shape[:2]} does not match plan "
            f"({plan.canvas_h},{plan.canvas_w})")
    if conds is None:
        conds = _anchor_conditions(grid, plan)
    patches = np.stack([
        project(canvas_t, a, plan.patch_h, plan.patch_w)
        for a in plan.positions
    ])
    eps = _eval_eps(model, patches, t, conds, cfg.guidance_weight, workers)
    acc = np.zeros(canvas_t.shape, dtype=np.float64)
    wacc = np.zeros(canvas_t.shape[:2], dtype=np.float64)
    for n, anchor in enumerate(plan.positions):
        upd = ddim_step(patches[n], eps[n], t, t_prev, sched, eta=0.0)
        if not np.all(np.isfinite(upd)):
            raise NumericError(
                f"non-finite patch update at anchor {anchor}, timestep {t}")
        unproject_accumulate(acc, wacc, anchor, upd.astype(np.float64),
                             plan.window)
    return (acc / wacc[:, :, None]).astype(np.float32)


def generate_large(model, grid, canvas_h, canvas_w, plan, sampler_cfg, sched,
                   workers=1):
    """Initialize canvas noise from the seed and run fused DDIM to J_0."""
    rng = np.random.default_rng(sampler_cfg.seed)
    canvas = rng.standard_normal((canvas_h, canvas_w, model.c), dtype=np.float32)
    ts = inference_timesteps(sched, sampler_cfg.num_inference_steps)
    conds = _anchor_conditions(grid, plan)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        canvas = fuse_step(canvas, grid, model, plan, int(t), t_prev, sched,
                           sampler_cfg, workers=workers, conds=conds)
    return canvas


def blended_decode(latent_canvas, codec, plan, workers=1):
    """Decode overlapping latent windows and fuse with the window weights."""
    h, w = latent_canvas.shape[:2]
    if (h, w) != (plan.canvas_h, plan.canvas_w):
        raise ConfigurationError(
            f"latent canvas {h}x{w} does not match plan "
            f"({plan.canvas_h},{plan.canvas_w})")
    acc = None
    wacc = np.zeros((h, w), dtype=np.float64)
    for anchor in plan.positions:
        patch = project(latent_canvas, anchor, plan.patch_h, plan.patch_w)
        decoded = np.asarray(codec(patch), dtype=np.float64)
        if decoded.shape[:2] != (plan.patch_h, plan.patch_w):
            raise ConfigurationError(
                f"codec returned {decoded.shape[:2]}, expected "
                f"({plan.patch_h},{plan.patch_w})")
        if acc is None:
            acc = np.zeros((h, w, decoded.shape[2]), dtype=np.float64)
        unproject_accumulate(acc, wacc, anchor, decoded, plan.window)
    return (acc / wacc[:, :, None]).astype(np.float32)


# -- image io ------------------------------------------------------------

def canvas_to_u8(canvas):
    """Map the [-1, 1] model range to 8-bit RGB."""
    arr = (np.asarray(canvas, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.round(arr), 0, 255).astype(np.uint8)


def u8_to_canvas(arr):
    return (np.asarray(arr, dtype=np.float32) / 127.5) - 1.0


def save_png(path, canvas):
    from PIL import Image

    Image.fromarray(canvas_to_u8(canvas)).save(path, format="PNG")


def load_png(path):
    from PIL import Image

    return u8_to_canvas(np.asarray(Image.open(path).convert("RGB")))


def save_ppm(path, canvas):
    u8 = canvas_to_u8(canvas)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (u8.shape[1], u8.shape[0]))
        fh.write(u8.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ConfigurationError(f"{path}: not a binary PPM (P6) file")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise ConfigurationError(f"{path}: unsupported maxval {maxval}")
        data = np.frombuffer(fh.read(h * w * 3), dtype=np.uint8)
    return u8_to_canvas(data.reshape(h, w, 3))
