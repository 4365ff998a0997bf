"""Noise schedules, forward noising and the DDPM / DDIM samplers.

Steps are 1-based throughout: ``t`` runs over ``1..T`` and the schedule
arrays are stored with index ``t - 1``. Diffusion operates on images
rescaled to ``[-1, 1]``; samplers hand back ``[0, 1]`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInput, NumericError
from .net import NULL_TOKENS, tokenize


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t):
        """``alpha_bar`` at step ``t`` with the convention ``alpha_bar_0 = 1``."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise InvalidInput(f"unknown schedule kind {kind!r}")
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise InvalidInput(f"invalid schedule T={T}, beta {beta_start}..{beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not (alpha_bar[-1] > 0 and np.all(np.diff(alpha_bar) < 0)):
        raise InvalidInput("alpha_bar underflows; shorten the schedule or lower beta")
    return NoiseSchedule(beta, alpha, alpha_bar)


def _coef(values, t, like):
    c = values[np.asarray(t) - 1]
    if isinstance(like, torch.Tensor):
        c = torch.as_tensor(c, dtype=like.dtype)
        if c.ndim == 1:
            c = c.reshape(-1, *([1] * (like.ndim - 1)))
    elif np.ndim(c) == 1:
        c = c.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return c


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``.

    Works on numpy arrays or torch tensors; ``t`` is an int or one step per
    leading batch item.
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise InvalidInput(f"shape mismatch {np.shape(x0)} vs {np.shape(eps)}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise InvalidInput(f"t outside 1..{schedule.T}")
    a = _coef(np.sqrt(schedule.alpha_bar), t_arr, x0)
    b = _coef(np.sqrt(1.0 - schedule.alpha_bar), t_arr, x0)
    return a * x0 + b * eps


# ---------------------------------------------------------------- sampling

def ddpm_sigmas(schedule: NoiseSchedule, variance: str = "beta") -> np.ndarray:
    """Per-step noise scale of ancestral sampling (index ``t - 1``).

    ``"beta"`` uses ``sigma_t^2 = beta_t``; ``"posterior"`` uses
    ``beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)``.
    """
    if variance == "beta":
        return np.sqrt(schedule.beta)
    if variance == "posterior":
        prev = schedule.alpha_bar_at(np.arange(schedule.T))
        return np.sqrt(schedule.beta * (1.0 - prev) / (1.0 - schedule.alpha_bar))
    raise InvalidInput(f"unknown variance {variance!r}")


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced ascending subsequence ``floor(i T / n)``, i = 1..n."""
    if not 1 <= n_steps <= T:
        raise InvalidInput(f"n_steps must lie in 1..{T}")
    return (np.arange(1, n_steps + 1) * T) // n_steps


def ddim_sigmas(schedule: NoiseSchedule, n_steps: int, eta: float) -> np.ndarray:
    """Noise scale of each DDIM update, ordered like :func:`ddim_timesteps`."""
    taus = ddim_timesteps(schedule.T, n_steps)
    prev = np.concatenate([[0], taus[:-1]])
    ab, ab_prev = schedule.alpha_bar_at(taus), schedule.alpha_bar_at(prev)
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))


def _tokens_batch(prompt, n):
    toks = prompt if isinstance(prompt, tuple) else tokenize(prompt)
    return torch.tensor([toks] * n, dtype=torch.long)


def _guided_eps(model, x, t, cond, guidance_scale):
    tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
    eps = model(x, tt, cond)
    if guidance_scale != 1:
        uncond = model(x, tt, torch.tensor([NULL_TOKENS] * x.shape[0]))
        eps = uncond + guidance_scale * (eps - uncond)
    return eps


def _finish(x, n):
    out = ((x.clamp(-1.0, 1.0) + 1.0) / 2.0)[:, 0].double().numpy()
    return out[0] if n is None else out


def _dtype_of(model):
    try:
        return next(model.parameters()).dtype
    except (StopIteration, AttributeError):
        return torch.float32


@torch.no_grad()
def sample_ddpm(model, prompt, schedule: NoiseSchedule, seed: int, guidance_scale: float = 1.0,
                n: int | None = None, image_size: int = 32, variance: str = "beta"):
    """Ancestral sampling from ``x_T ~ N(0, I)``.

    ``prompt`` is a string or token tuple. Returns one ``(H, W)`` image in
    [0, 1] when ``n`` is None, else an ``(n, H, W)`` stack.
    """
    batch = 1 if n is None else n
    gen = torch.Generator().manual_seed(seed)
    dtype = _dtype_of(model)
    x = torch.randn(batch, 1, image_size, image_size, generator=gen, dtype=torch.float64).to(dtype)
    cond = _tokens_batch(prompt, batch)
    sigmas = ddpm_sigmas(schedule, variance)
    for t in range(schedule.T, 0, -1):
        eps = _guided_eps(model, x, t, cond, guidance_scale)
        beta, alpha, ab = (float(a[t - 1]) for a in (schedule.beta, schedule.alpha, schedule.alpha_bar))
        x = (x - (beta / math.sqrt(1.0 - ab)) * eps) / math.sqrt(alpha)
        if t > 1:
            z = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)
            x = x + float(sigmas[t - 1]) * z
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {t}", t)
    return _finish(x, n)


@torch.no_grad()
def sample_ddim(model, prompt, schedule: NoiseSchedule, n_steps: int = 50, eta: float = 0.0,
                seed: int = 0, guidance_scale: float = 1.0, n: int | None = None,
                image_size: int = 32, x_T=None, clip_x0: bool = True):
    """DDIM sampling over an evenly spaced subsequence of steps.

    With ``eta=0`` the trajectory is a deterministic function of ``x_T``.
    ``x_T`` may be supplied directly; otherwise it is drawn from ``seed``.
    With ``clip_x0`` the predicted clean image is clamped to [-1, 1] and the
    noise estimate re-derived from it before each update.
    """
    if not 0.0 <= eta <= 1.0:
        raise InvalidInput("eta must lie in [0, 1]")
    taus = ddim_timesteps(schedule.T, n_steps)
    sigmas = ddim_sigmas(schedule, n_steps, eta)
    gen = torch.Generator().manual_seed(seed)
    dtype = _dtype_of(model)
    if x_T is None:
        batch = 1 if n is None else n
        x = torch.randn(batch, 1, image_size, image_size, generator=gen, dtype=torch.float64).to(dtype)
    else:
        x = torch.as_tensor(x_T).to(dtype).clone()
        batch = x.shape[0]
    cond = _tokens_batch(prompt, batch)
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        t_prev = int(taus[i - 1]) if i > 0 else 0
        ab, ab_prev = float(schedule.alpha_bar_at(t)), float(schedule.alpha_bar_at(t_prev))
        eps = _guided_eps(model, x, t, cond, guidance_scale)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip_x0:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
            eps = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
        sigma = float(sigmas[i])
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {t}", t)
    return _finish(x, None if x_T is None and n is None else batch)
