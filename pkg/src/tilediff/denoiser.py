"""Noise predictors: the exact analytic Gaussian oracle and a small
trainable conditional residual network with its Adam training loop."""

import struct
from dataclasses import dataclass

import numpy as np

from .conditioning import ConditionVector
from .errors import ConfigurationError, ContractViolation, NumericError
from .nn import autograd as ag
from .nn.adam import Adam

FEATURE_SEED = 0xD1FF
COND_DROP_PROB = 0.1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    loss_log_interval: int = 50


class AnalyticGaussianDenoiser:
    """Exact epsilon-predictor for data distributed N(mu, sigma2 * I).

    Serves as the verification oracle for the sampler: with this model the
    DDIM chain should reproduce the target Gaussian's moments.
    """

    kind = "analytic_gaussian"

    def __init__(self, mu, sigma2, sched, d=32):
        if sigma2 <= 0:
            raise ContractViolation(f"sigma2 must be > 0, got {sigma2}")
        self.mu = np.asarray(mu, dtype=np.float32)
        self.sigma2 = float(sigma2)
        self.sched = sched
        self.h, self.w, self.c = self.mu.shape
        self.d = d

    def eps(self, x_t, t, y):
        return analytic_gaussian_eps(x_t, t, self.mu, self.sigma2, self.sched)


def analytic_gaussian_eps(x_t, t, mu, sigma2, sched):
    """Closed-form posterior-mean prediction for Gaussian data."""
    if sigma2 <= 0:
        raise ContractViolation(f"sigma2 must be > 0, got {sigma2}")
    ab = sched.alpha_bar[t]
    dt = x_t.dtype.type
    sq_ab = np.sqrt(ab)
    gain = sq_ab * sigma2 / (ab * sigma2 + 1.0 - ab)
    x0_hat = mu + dt(gain) * (x_t - dt(sq_ab) * mu)
    eps_hat = (x_t - dt(sq_ab) * x0_hat) / dt(np.sqrt(1.0 - ab))
    return eps_hat.astype(x_t.dtype)


def sinusoidal_embedding(t, dim):
    """Standard sin/cos timestep embedding, (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class CondDenoiser:
    """Residual conv network predicting epsilon from (x_t, t, y).

    Conditioning enters as per-channel scale-and-shift at every residual
    block; the null token is the zero vector passed through the same
    projection.
    """

    kind = "learned"

    def __init__(self, h=32, w=32, c=3, d=32, base=32, emb_dim=64, seed=0,
                 dtype=np.float32):
        if h % 2 or w % 2:
            raise ConfigurationError("patch extents must be even")
        self.h, self.w, self.c, self.d = h, w, c, d
        self.base = base
        self.emb_dim = emb_dim
        self.dtype = dtype
        self.params = {}
        rng = np.random.default_rng(seed)
        b2 = base * 2

        def p(name, shape, scale=None, zero=False):
            if zero:
                arr = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
                s = scale if scale is not None else np.sqrt(2.0 / fan_in)
                arr = (rng.standard_normal(shape) * s).astype(dtype)
            self.params[name] = arr

        p("t1.w", (emb_dim, emb_dim))
        p("t1.b", (emb_dim,), zero=True)
        p("t2.w", (emb_dim, emb_dim))
        p("t2.b", (emb_dim,), zero=True)
        p("proj.w", (emb_dim, d))
        p("proj.b", (emb_dim,), zero=True)
        p("stem.w", (base, c, 3, 3))
        p("stem.b", (base,), zero=True)
        for name, ch in (("rb1", base), ("rb2", b2), ("rb3", base), ("rb4", base)):
            p(f"{name}.scale.w", (ch, emb_dim), scale=1e-2)
            p(f"{name}.scale.b", (ch,), zero=True)
            p(f"{name}.shift.w", (ch, emb_dim), scale=1e-2)
            p(f"{name}.shift.b", (ch,), zero=True)
            p(f"{name}.c1.w", (ch, ch, 3, 3))
            p(f"{name}.c1.b", (ch,), zero=True)
            p(f"{name}.c2.w", (ch, ch, 3, 3), scale=1e-3)
            p(f"{name}.c2.b", (ch,), zero=True)
        p("down.w", (b2, base, 3, 3))
        p("down.b", (b2,), zero=True)
        p("up.w", (base, b2, 3, 3))
        p("up.b", (base,), zero=True)
        p("head.w", (c, base, 3, 3), scale=1e-3)
        p("head.b", (c,), zero=True)

    # -- forward ---------------------------------------------------------

    def _resblock(self, pv, x, emb, name, n):
        ch = pv[f"{name}.c1.w"].data.shape[0]
        s = ag.linear(emb, pv[f"{name}.scale.w"], pv[f"{name}.scale.b"])
        b = ag.linear(emb, pv[f"{name}.shift.w"], pv[f"{name}.shift.b"])
        s = ag.reshape(s, (n, ch, 1, 1))
        b = ag.reshape(b, (n, ch, 1, 1))
        one = ag.const(np.ones((), dtype=self.dtype))
        h = ag.add(ag.mul(x, ag.add(one, s)), b)
        h = ag.conv3x3(ag.silu(h), pv[f"{name}.c1.w"], pv[f"{name}.c1.b"])
        h = ag.conv3x3(ag.silu(h), pv[f"{name}.c2.w"], pv[f"{name}.c2.b"])
        return ag.add(x, h)

    def forward_vars(self, pv, x_nchw, t, y_nd):
        """Full forward pass over autograd Vars; returns (eps, bottleneck)."""
        n = x_nchw.shape[0]
        temb = sinusoidal_embedding(t, self.emb_dim).astype(self.dtype)
        ht = ag.linear(ag.const(temb), pv["t1.w"], pv["t1.b"])
        ht = ag.linear(ag.silu(ht), pv["t2.w"], pv["t2.b"])
        hc = ag.linear(ag.const(y_nd.astype(self.dtype)), pv["proj.w"], pv["proj.b"])
        emb = ag.silu(ag.add(ht, hc))

        x = ag.conv3x3(ag.const(x_nchw), pv["stem.w"], pv["stem.b"])
        x = self._resblock(pv, x, emb, "rb1", n)
        skip = x
        x = ag.avgpool2(x)
        x = ag.conv3x3(x, pv["down.w"], pv["down.b"])
        x = self._resblock(pv, x, emb, "rb2", n)
        bottleneck = x
        x = ag.upsample2(x)
        x = ag.conv3x3(x, pv["up.w"], pv["up.b"])
        x = ag.add(x, skip)
        x = self._resblock(pv, x, emb, "rb3", n)
        x = self._resblock(pv, x, emb, "rb4", n)
        out = ag.conv3x3(ag.silu(x), pv["head.w"], pv["head.b"])
        return out, bottleneck

    def _param_vars(self):
        return {k: ag.Var(v) for k, v in self.params.items()}

    def eps_batch(self, x_batch_hwcn, t, y_batch):
        """Inference over a batch: x (N,H,W,C), t scalar or (N,), y (N,d)."""
        x = np.ascontiguousarray(np.transpose(x_batch_hwcn, (0, 3, 1, 2)))
        if x.shape[2] != self.h or x.shape[3] != self.w or x.shape[1] != self.c:
            raise ContractViolation(
                f"patch geometry {x.shape[1:]} does not match model "
                f"({self.c},{self.h},{self.w})")
        t = np.broadcast_to(np.atleast_1d(t), (x.shape[0],))
        out, _ = self.forward_vars(self._param_vars(), x.astype(self.dtype), t,
                                   np.asarray(y_batch))
        return np.transpose(out.data, (0, 2, 3, 1))

    def eps(self, x_t, t, y):
        feats = project_input_condition(y, self.d)
        return self.eps_batch(x_t[None], t, feats[None])[0]

    @property
    def bottleneck_channels(self):
        return self.base * 2


def project_input_condition(y, d):
    """Raw conditioning -> the d-vector fed to the network's projection."""
    if isinstance(y, ConditionVector):
        if y.is_null:
            return np.zeros(d, dtype=np.float32)
        vec = y.values.astype(np.float64)
    else:
        vec = np.asarray(y, dtype=np.float64)
        if np.linalg.norm(vec) < 1e-12:
            raise ContractViolation(
                "zero conditioning vector not flagged null is ambiguous with "
                "the null token")
    if vec.shape != (d,):
        raise ContractViolation(f"condition dim {vec.shape} != ({d},)")
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec = vec / norm
    return vec.astype(np.float32)


def project_condition(y_raw, model):
    """L2-normalize (unless null) and apply the model's linear projection."""
    vec = project_input_condition(y_raw, model.d)
    return vec @ model.params["proj.w"].T + model.params["proj.b"]


def train_denoiser(dataset, sched, cfg, model=None, progress=None):
    """Train the epsilon objective with per-sample condition dropout.

    Returns (model, loss_history); loss_history holds one float per
    iteration.
    """
    data = list(dataset)
    if not data:
        raise ConfigurationError("empty training dataset")
    patches = np.stack([np.asarray(item[0], dtype=np.float32) for item in data])
    first = data[0][1]
    d = first.dim if isinstance(first, ConditionVector) else np.asarray(first).shape[0]
    if model is not None:
        d = model.d
    conds = np.stack([project_input_condition(item[1], d) for item in data])
    h, w, c = patches.shape[1:]
    if model is None:
        model = CondDenoiser(h=h, w=w, c=c, d=conds.shape[1], seed=cfg.seed)
    if (h, w, c) != (model.h, model.w, model.c):
        raise ContractViolation(
            f"dataset patches {h}x{w}x{c} do not match model geometry")

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2)
    history = []
    n = patches.shape[0]
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        x0 = patches[idx]
        y = conds[idx].copy()
        drop = rng.random(cfg.batch_size) < COND_DROP_PROB
        y[drop] = 0.0
        t = rng.integers(0, sched.T, size=cfg.batch_size)
        noise = rng.standard_normal(x0.shape, dtype=np.float32)
        ab = sched.alpha_bar[t].astype(np.float32)[:, None, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

        pv = {k: ag.Var(v) for k, v in model.params.items()}
        x_nchw = np.ascontiguousarray(np.transpose(x_t, (0, 3, 1, 2)))
        eps_nchw = np.ascontiguousarray(np.transpose(noise, (0, 3, 1, 2)))
        if cfg.learning_rate > 0:
            out, _ = model.forward_vars(pv, x_nchw, t, y)
            loss = ag.mse(out, ag.const(eps_nchw))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(f"NaN loss at iteration {it}")
            loss.backward()
            opt.step({k: pv[k].grad for k in model.params})
        else:
            out, _ = model.forward_vars(pv, x_nchw, t, y)
            loss_val = float(np.mean((out.data - eps_nchw) ** 2))
            if not np.isfinite(loss_val):
                raise NumericError(f"NaN loss at iteration {it}")
        history.append(loss_val)
        if progress is not None and (it % cfg.loss_log_interval == 0
                                     or it == cfg.iterations - 1):
            progress(it, loss_val)
    return model, history


def extract_diffusion_features(model, patch, y, t_fixed=50, sched=None):
    """Pooled bottleneck activations at a fixed noising level, concatenated
    with the conditioning vector."""
    if model.kind != "learned":
        raise ContractViolation("diffusion features require a learned model")
    if sched is None:
        raise ContractViolation("a noise schedule is required")
    if not (0 <= t_fixed < sched.T):
        raise ContractViolation(f"t_fixed={t_fixed} outside schedule range")
    rng = np.random.default_rng(FEATURE_SEED)
    noise = rng.standard_normal(patch.shape, dtype=np.float32)
    ab = np.float32(sched.alpha_bar[t_fixed])
    x_t = np.sqrt(ab) * np.asarray(patch, dtype=np.float32) + np.sqrt(1 - ab) * noise
    feats = project_input_condition(y, model.d)
    x = np.ascontiguousarray(np.transpose(x_t[None], (0, 3, 1, 2)))
    _, bottleneck = model.forward_vars(model._param_vars(), x,
                                       np.array([t_fixed]), feats[None])
    pooled = bottleneck.data[0].mean(axis=(1, 2))
    return np.concatenate([pooled, feats]).astype(np.float32)


# -- checkpoint io -------------------------------------------------------

MODEL_MAGIC = b"MDFM"
MODEL_VERSION = 1


def save_denoiser(path, model):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<6I", MODEL_VERSION, model.h, model.w, model.c,
                             model.d, model.base))
        for name in model.params:
            fh.write(model.params[name].astype("<f4").tobytes())


def load_denoiser(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ConfigurationError(f"{path}: bad checkpoint magic {magic!r}")
        version, h, w, c, d, base = struct.unpack("<6I", fh.read(24))
        if version != MODEL_VERSION:
            raise ConfigurationError(f"{path}: unsupported version {version}")
        model = CondDenoiser(h=h, w=w, c=c, d=d, base=base)
        for name in model.params:
            shape = model.params[name].shape
            count = int(np.prod(shape))
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ConfigurationError(f"{path}: truncated parameter block {name}")
            model.params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return model
