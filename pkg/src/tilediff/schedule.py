"""Forward-process noise schedules and the reverse DDIM update with
classifier-free guidance."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError, TileDiffError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance increments beta and cumulative products alpha_bar."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 50
    guidance_weight: float = 1.75
    eta: float = 0.0
    seed: int = 0


def build_linear_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end, got beta_start={beta_start}, "
            f"beta_end={beta_end}")
    if beta_end >= 1.0:
        raise ConfigurationError(f"beta_end must be < 1, got {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def inference_timesteps(sched, num_inference_steps):
    """Uniformly spaced timestep subsequence over [0, T-1], largest first."""
    if num_inference_steps > sched.T:
        raise ConfigurationError(
            f"num_inference_steps={num_inference_steps} exceeds T={sched.T}")
    ts = np.linspace(sched.T - 1, 0, num_inference_steps)
    ts = np.round(ts).astype(np.int64)
    if np.any(np.diff(ts) >= 0):
        raise ConfigurationError(
            f"timesteps not strictly decreasing for {num_inference_steps} "
            f"steps over T={sched.T}")
    return ts


def cfg_combine(eps_cond, eps_uncond, w):
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ContractViolation(
            f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    dtype = eps_cond.dtype
    return (eps_uncond + dtype.type(w) * (eps_cond - eps_uncond)).astype(dtype)


def ddim_step(x_t, eps_hat, t, t_prev, sched, eta=0.0, noise=None):
    """One deterministic (eta=0) or stochastic DDIM transition.

    t_prev = -1 is the terminal sentinel: return the predicted clean patch.
    """
    if not (0 <= t < sched.T):
        raise ContractViolation(f"t={t} outside schedule range [0, {sched.T})")
    if not (-1 <= t_prev < t):
        raise ContractViolation(f"need t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    dt = x_t.dtype.type
    ab_t = sched.alpha_bar[t]
    if ab_t <= 0.0 or not np.isfinite(ab_t):
        raise NumericError(f"alpha_bar[{t}] = {ab_t} underflowed")
    x0_hat = (x_t - dt(np.sqrt(1.0 - ab_t)) * eps_hat) / dt(np.sqrt(ab_t))
    if t_prev == -1:
        return x0_hat.astype(x_t.dtype)
    ab_p = sched.alpha_bar[t_prev]
    sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    x_prev = (dt(np.sqrt(ab_p)) * x0_hat
              + dt(np.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0))) * eps_hat)
    if sigma > 0.0:
        if noise is None:
            raise ContractViolation("eta > 0 requires a noise patch")
        x_prev = x_prev + dt(sigma) * noise
    return x_prev.astype(x_t.dtype)


def sample_patch(model, y, cfg, sched):
    """Draw x_T from the seed and run guided DDIM down to the clean patch."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((model.h, model.w, model.c), dtype=np.float32)
    ts = inference_timesteps(sched, cfg.num_inference_steps)
    null = y.null_like() if hasattr(y, "null_like") else None
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        try:
            eps_c = model.eps(x, int(t), y)
            if cfg.guidance_weight == 1.0 or null is None:
                eps = eps_c
            else:
                eps_u = model.eps(x, int(t), null)
                eps = cfg_combine(eps_c, eps_u, cfg.guidance_weight)
        except TileDiffError:
            raise
        except Exception as exc:
            raise RuntimeError(f"denoiser failed at timestep {t}: {exc}") from exc
        noise = None
        if cfg.eta > 0.0 and t_prev != -1:
            noise = rng.standard_normal(x.shape, dtype=np.float32)
        x = ddim_step(x, eps, int(t), int(t_prev), sched, eta=cfg.eta, noise=noise)
    return x
