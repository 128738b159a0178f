"""Auxiliary diffusion prior over embedding grids: samples a spatial grid
of conditioning vectors from a higher-level condition, so large images can
be generated from class codes or caption-style vectors."""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conditioning import EmbeddingGrid
from .errors import ConfigurationError, ContractViolation, NumericError
from .mosaic import generate_large
from .nn import autograd as ag
from .nn.adam import Adam
from .schedule import build_linear_schedule, inference_timesteps

COND_NOISE_VAR = 0.1
PRIOR_T = 1000
PRIOR_SAMPLE_STEPS = 100


@dataclass(frozen=True)
class AuxCondition:
    values: np.ndarray
    label: Optional[int] = None

    @property
    def dim(self):
        return self.values.shape[0]


class PriorModel:
    """Residual conv net over grids predicting the clean grid directly.

    Timestep and condition enter as channels concatenated to the noisy
    grid (timestep as a constant t/T plane, condition broadcast spatially).
    """

    def __init__(self, rows, cols, d, d_c, cell_h, cell_w, width=64, seed=0):
        self.rows, self.cols, self.d, self.d_c = rows, cols, d, d_c
        self.cell_h, self.cell_w = cell_h, cell_w
        self.width = width
        self.trained = False
        self.sched = build_linear_schedule(PRIOR_T)
        self.params = {}
        rng = np.random.default_rng(seed)
        in_ch = d + 1 + d_c

        def p(name, shape, scale=None, zero=False):
            if zero:
                arr = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                s = scale if scale is not None else np.sqrt(2.0 / fan_in)
                arr = (rng.standard_normal(shape) * s).astype(np.float32)
            self.params[name] = arr

        p("stem.w", (width, in_ch, 3, 3))
        p("stem.b", (width,), zero=True)
        for name in ("rb1", "rb2", "rb3"):
            p(f"{name}.c1.w", (width, width, 3, 3))
            p(f"{name}.c1.b", (width,), zero=True)
            p(f"{name}.c2.w", (width, width, 3, 3), scale=1e-3)
            p(f"{name}.c2.b", (width,), zero=True)
        p("head.w", (d, width, 3, 3), scale=1e-2)
        p("head.b", (d,), zero=True)

    def forward_vars(self, pv, z_nchw, t, c_ndc):
        n = z_nchw.shape[0]
        t_norm = (np.asarray(t, dtype=np.float32) / self.sched.T)
        tmap = np.broadcast_to(
            t_norm[:, None, None, None], (n, 1, self.rows, self.cols)
        ).astype(np.float32)
        cmap = np.broadcast_to(
            c_ndc[:, :, None, None].astype(np.float32),
            (n, self.d_c, self.rows, self.cols))
        x = ag.concat_channels([
            ag.const(np.ascontiguousarray(z_nchw)),
            ag.const(np.ascontiguousarray(tmap)),
            ag.const(np.ascontiguousarray(cmap)),
        ])
        x = ag.conv3x3(x, pv["stem.w"], pv["stem.b"])
        for name in ("rb1", "rb2", "rb3"):
            h = ag.conv3x3(ag.silu(x), pv[f"{name}.c1.w"], pv[f"{name}.c1.b"])
            h = ag.conv3x3(ag.silu(h), pv[f"{name}.c2.w"], pv[f"{name}.c2.b"])
            x = ag.add(x, h)
        return ag.conv3x3(ag.silu(x), pv["head.w"], pv["head.b"])

    def predict_z0(self, z_grid_rcd, t, c_values):
        """Inference: (rows, cols, d) noisy grid -> predicted clean grid."""
        z = np.transpose(z_grid_rcd, (2, 0, 1))[None].astype(np.float32)
        pv = {k: ag.Var(v) for k, v in self.params.items()}
        out = self.forward_vars(pv, z, np.array([t]),
                                np.asarray(c_values, dtype=np.float32)[None])
        return np.transpose(out.data[0], (1, 2, 0))


def train_prior(pairs, cfg, width=64, cond_noise_var=COND_NOISE_VAR,
                progress=None):
    """x0-prediction training with Gaussian perturbation of the condition.

    Returns (prior, loss_history).
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("empty prior training set")
    shapes = {g.embeddings.shape for g, _ in pairs}
    if len(shapes) != 1:
        raise ConfigurationError(f"inconsistent grid shapes: {sorted(shapes)}")
    g0 = pairs[0][0]
    grids = np.stack([np.transpose(g.embeddings, (2, 0, 1)) for g, _ in pairs])
    conds = np.stack([np.asarray(c.values, dtype=np.float32) for _, c in pairs])
    prior = PriorModel(rows=g0.rows, cols=g0.cols, d=g0.dim,
                       d_c=conds.shape[1], cell_h=g0.cell_h, cell_w=g0.cell_w,
                       width=width, seed=cfg.seed)
    sched = prior.sched
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(prior.params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2)
    history = []
    n = grids.shape[0]
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        z0 = grids[idx]
        c = conds[idx]
        if cond_noise_var > 0:
            c = c + (rng.standard_normal(c.shape)
                     * np.sqrt(cond_noise_var)).astype(np.float32)
        t = rng.integers(0, sched.T, size=cfg.batch_size)
        noise = rng.standard_normal(z0.shape).astype(np.float32)
        ab = sched.alpha_bar[t].astype(np.float32)[:, None, None, None]
        z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise

        pv = {k: ag.Var(v) for k, v in prior.params.items()}
        out = prior.forward_vars(pv, z_t, t, c)
        loss = ag.mse(out, ag.const(z0))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericError(f"NaN loss at iteration {it}")
        if cfg.learning_rate > 0:
            loss.backward()
            opt.step({k: pv[k].grad for k in prior.params})
        history.append(loss_val)
        if progress is not None and (it % cfg.loss_log_interval == 0
                                     or it == cfg.iterations - 1):
            progress(it, loss_val)
    prior.trained = True
    return prior, history


def sample_grid(prior, c, c_negative=None, guidance_w=1.0, seed=0,
                num_steps=PRIOR_SAMPLE_STEPS):
    """Reverse diffusion on grid-shaped noise; cells renormalized to unit."""
    if not prior.trained:
        raise ContractViolation("prior has not been trained")
    if c.dim != prior.d_c:
        raise ContractViolation(
            f"condition dim {c.dim} != prior condition dim {prior.d_c}")
    sched = prior.sched
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((prior.rows, prior.cols, prior.d)).astype(np.float32)
    ts = inference_timesteps(sched, num_steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        z0_hat = prior.predict_z0(z, int(t), c.values)
        if c_negative is not None and guidance_w != 1.0:
            z0_neg = prior.predict_z0(z, int(t), c_negative.values)
            z0_hat = z0_neg + np.float32(guidance_w) * (z0_hat - z0_neg)
        ab_t = np.float32(sched.alpha_bar[t])
        eps_implied = (z - np.sqrt(ab_t) * z0_hat) / np.sqrt(1.0 - ab_t)
        if t_prev == -1:
            z = z0_hat
        else:
            ab_p = np.float32(sched.alpha_bar[t_prev])
            z = np.sqrt(ab_p) * z0_hat + np.sqrt(1.0 - ab_p) * eps_implied
    norms = np.linalg.norm(z.astype(np.float64), axis=2, keepdims=True)
    norms[norms < 1e-12] = 1.0
    z = (z / norms).astype(np.float32)
    return EmbeddingGrid(embeddings=z, cell_h=prior.cell_h, cell_w=prior.cell_w)


def condition_to_large_image(prior, c, model, plan, sampler_cfg,
                             sched, c_negative=None, guidance_w=1.0,
                             workers=1):
    """Chain grid sampling and large-image generation.

    Returns (canvas, grid)."""
    grid = sample_grid(prior, c, c_negative=c_negative, guidance_w=guidance_w,
                       seed=sampler_cfg.seed)
    if (grid.rows * grid.cell_h != plan.canvas_h
            or grid.cols * grid.cell_w != plan.canvas_w):
        raise ContractViolation(
            f"prior grid covers {grid.rows * grid.cell_h}x"
            f"{grid.cols * grid.cell_w}, plan canvas is "
            f"{plan.canvas_h}x{plan.canvas_w}")
    canvas = generate_large(model, grid, plan.canvas_h, plan.canvas_w, plan,
                            sampler_cfg, sched, workers=workers)
    return canvas, grid


# -- checkpoint io -------------------------------------------------------

PRIOR_MAGIC = b"MDPR"
PRIOR_VERSION = 1


def save_prior(path, prior):
    with open(path, "wb") as fh:
        fh.write(PRIOR_MAGIC)
        fh.write(struct.pack("<8I", PRIOR_VERSION, prior.rows, prior.cols,
                             prior.d, prior.d_c, prior.width, prior.cell_h,
                             prior.cell_w))
        for name in prior.params:
            fh.write(prior.params[name].astype("<f4").tobytes())


def load_prior(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PRIOR_MAGIC:
            raise ConfigurationError(f"{path}: bad prior magic {magic!r}")
        version, rows, cols, d, d_c, width, cell_h, cell_w = struct.unpack(
            "<8I", fh.read(32))
        if version != PRIOR_VERSION:
            raise ConfigurationError(f"{path}: unsupported version {version}")
        prior = PriorModel(rows=rows, cols=cols, d=d, d_c=d_c, cell_h=cell_h,
                           cell_w=cell_w, width=width)
        for name in prior.params:
            shape = prior.params[name].shape
            count = int(np.prod(shape))
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ConfigurationError(f"{path}: truncated block {name}")
            prior.params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    prior.trained = True
    return prior
