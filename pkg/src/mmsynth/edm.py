"""EDM-style denoiser over standardized joint latents.

The raw network ``F`` is wrapped with sigma-dependent preconditioning

    D(x, sigma) = c_skip * x + c_out * F(c_in * x, c_noise)

and trained with the weighted regression ``w(sigma) * ||D(z + sigma*eps) - z||^2``,
``w = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2``. Sampling follows the
stochastic second-order (Heun) scheme on the Karras sigma grid.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from ._training import seeded


class SamplingDiverged(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 1.0
    rho: float = 7.0
    n_steps: int = 50
    train_sigma: str = "cosine-grid"  # or "lognormal"
    grid_size: int = 1000
    cosine_offset: float = 0.008
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.train_sigma not in ("cosine-grid", "lognormal"):
            raise ValueError(f"unknown training sigma sampler {self.train_sigma!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplerConfig:
    s_churn: float = 3.0
    s_noise: float = 1.2
    n_steps: int = 50
    seed: int = 0
    heun: bool = True

    def __post_init__(self):
        if self.s_churn < 0:
            raise ValueError("s_churn must be non-negative")
        if self.s_noise <= 0:
            raise ValueError("s_noise must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiffusionConfig:
    hidden: tuple[int, ...] = (256, 256, 128)
    emb_dim: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 2048
    steps: int = 1000
    epochs: int = 0  # when positive, overrides ``steps`` with full passes over the latents

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or self.emb_dim % 2 or self.steps < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid diffusion config")

    def total_steps(self, n_rows: int) -> int:
        if self.epochs:
            return self.epochs * math.ceil(n_rows / self.batch_size)
        return self.steps

    def to_dict(self) -> dict:
        return asdict(self)


def edm_coefficients(sigma, sigma_data: float = 1.0):
    """Return ``(c_skip, c_out, c_in, c_noise)`` for noise level(s) ``sigma``."""
    if isinstance(sigma, torch.Tensor):
        if (sigma <= 0).any():
            raise ValueError("sigma must be positive")
        sqrt, log = torch.sqrt, torch.log
    else:
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        sqrt, log = np.sqrt, np.log
    s2, d2 = sigma ** 2, sigma_data ** 2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / sqrt(s2 + d2)
    c_in = 1.0 / sqrt(s2 + d2)
    c_noise = 0.25 * log(sigma)
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float = 1.0):
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


class FourierEmbedding(nn.Module):
    def __init__(self, dim: int, max_freq: float = 64.0):
        super().__init__()
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, math.log(max_freq), dim // 2)))

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        arg = c_noise[:, None] * self.freqs.to(c_noise.dtype)
        return torch.cat([torch.cos(arg), torch.sin(arg)], dim=1)


class DenoiserMLP(nn.Module):
    """Raw network ``F(c_in * x, c_noise)``.

    The scaled latent is concatenated with a sinusoidal embedding of
    ``c_noise`` and passed through SiLU layers of ``hidden`` widths. A second
    head maps the embedding to a per-dimension gain applied to the input, so a
    noise-dependent linear denoiser (exact for Gaussian data) is representable
    without the trunk having to learn multiplicative interactions.
    """

    def __init__(self, dim: int, hidden=(256, 256, 128), emb_dim: int = 32, gain_hidden: int = 64):
        super().__init__()
        self.dim = dim
        self.embed = FourierEmbedding(emb_dim)
        layers, width = [], dim + emb_dim + 1
        for h in hidden:
            layers += [nn.Linear(width, h), nn.SiLU()]
            width = h
        layers.append(nn.Linear(width, dim))
        self.net = nn.Sequential(*layers)
        self.gain = nn.Sequential(nn.Linear(emb_dim + 1, gain_hidden), nn.SiLU(), nn.Linear(gain_hidden, dim))

    def forward(self, x_in: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        emb = torch.cat([self.embed(c_noise), c_noise[:, None]], dim=1)
        return self.net(torch.cat([x_in, emb], dim=1)) + self.gain(emb) * x_in


class Denoiser(nn.Module):
    """Preconditioned wrapper; ``forward(x, sigma)`` returns the clean-latent estimate."""

    def __init__(self, raw: nn.Module, sigma_data: float = 1.0):
        super().__init__()
        self.raw = raw
        self.sigma_data = sigma_data

    @property
    def dim(self) -> int:
        return self.raw.dim

    def forward(self, x: torch.Tensor, sigma) -> torch.Tensor:
        return precondition(self.raw, x, sigma, self.sigma_data)


def _sigma_column(sigma, x: torch.Tensor) -> torch.Tensor:
    sigma = torch.as_tensor(sigma, dtype=x.dtype)
    if sigma.ndim == 0:
        sigma = sigma.expand(len(x))
    return sigma.reshape(len(x))


def precondition(raw: nn.Module, x: torch.Tensor, sigma, sigma_data: float = 1.0) -> torch.Tensor:
    sigma = _sigma_column(sigma, x)
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, sigma_data)
    dtype = next(raw.parameters()).dtype
    f = raw((c_in[:, None] * x).to(dtype), c_noise.to(dtype)).to(x.dtype)
    return c_skip[:, None] * x + c_out[:, None] * f


def cosine_sigma_grid(schedule: NoiseSchedule) -> torch.Tensor:
    """Noise levels of a cosine alpha-bar schedule, ``sigma = sqrt((1 - abar) / abar)``, clipped."""
    u = (torch.arange(schedule.grid_size, dtype=torch.float64) + 0.5) / schedule.grid_size
    s = schedule.cosine_offset
    sigma = torch.tan((u + s) / (1 + s) * (math.pi / 2))
    return sigma.clamp(schedule.sigma_min, schedule.sigma_max)


def draw_sigmas(schedule: NoiseSchedule, n: int, generator: torch.Generator) -> torch.Tensor:
    if schedule.train_sigma == "lognormal":
        ln = torch.randn(n, generator=generator, dtype=torch.float64) * schedule.p_std + schedule.p_mean
        return ln.exp()
    grid = cosine_sigma_grid(schedule)
    return grid[torch.randint(len(grid), (n,), generator=generator)]


def denoise_loss(denoiser: Denoiser, z: torch.Tensor, schedule: NoiseSchedule,
                 generator: torch.Generator | None = None, sigma: torch.Tensor | None = None,
                 eps: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of ``w(sigma) * ||D(z + sigma * eps, sigma) - z||^2``.

    Evaluated in the equivalent unit-weight form on the raw output,
    ``||F - (z - c_skip * x) / c_out||^2``, which avoids cancellation at small sigma.
    """
    dtype = next(denoiser.parameters()).dtype
    z = torch.as_tensor(z, dtype=dtype)
    if sigma is None:
        sigma = draw_sigmas(schedule, len(z), generator)
    sigma = torch.as_tensor(sigma, dtype=dtype).reshape(len(z))
    if eps is None:
        eps = torch.randn(z.shape, generator=generator, dtype=torch.float64)
    eps = torch.as_tensor(eps, dtype=dtype)
    x = z + sigma[:, None] * eps
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, denoiser.sigma_data)
    f = denoiser.raw(c_in[:, None] * x, c_noise)
    target = (z - c_skip[:, None] * x) / c_out[:, None]
    loss = (f - target).pow(2).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite denoising loss; sigma range [{float(sigma.min())}, {float(sigma.max())}]")
    return loss


def sigma_grid(schedule: NoiseSchedule, n_steps: int | None = None) -> np.ndarray:
    """Karras grid ``sigma_max -> sigma_min`` in ``n_steps`` levels, with a final 0 appended."""
    n = schedule.n_steps if n_steps is None else n_steps
    if n < 1:
        raise ValueError("n_steps must be at least 1")
    if n == 1:
        return np.array([schedule.sigma_max, 0.0])
    inv_rho = 1.0 / schedule.rho
    i = np.arange(n, dtype=np.float64)
    hi, lo = schedule.sigma_max ** inv_rho, schedule.sigma_min ** inv_rho
    sig = (hi + i / (n - 1) * (lo - hi)) ** schedule.rho
    sig[0], sig[-1] = schedule.sigma_max, schedule.sigma_min
    return np.append(sig, 0.0)


DenoiseFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def sample(denoiser: DenoiseFn, n: int, dim: int, schedule: NoiseSchedule, cfg: SamplerConfig,
           trajectory: list | None = None) -> np.ndarray:
    """Draw ``n`` standardized latents by integrating from ``sigma_max`` to 0.

    ``denoiser(x, sigma)`` maps a float64 batch and a scalar noise level to the
    clean estimate. If ``trajectory`` is a list it receives
    ``(step, sigma, mean ||x||)`` per step.
    """
    if n == 0:
        return np.zeros((0, dim))
    sigmas = sigma_grid(schedule, cfg.n_steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn((n, dim), generator=gen, dtype=torch.float64) * sigmas[0]
    gamma = min(cfg.s_churn / cfg.n_steps, math.sqrt(2.0) - 1.0) if cfg.s_churn > 0 else 0.0
    for i in range(cfg.n_steps):
        s_cur, s_next = float(sigmas[i]), float(sigmas[i + 1])
        s_hat = s_cur * (1.0 + gamma)
        if gamma > 0:
            noise = torch.randn((n, dim), generator=gen, dtype=torch.float64)
            x = x + math.sqrt(s_hat ** 2 - s_cur ** 2) * cfg.s_noise * noise
        d = (x - denoiser(x, torch.tensor(s_hat, dtype=torch.float64))) / s_hat
        x_next = x + (s_next - s_hat) * d
        if cfg.heun and s_next > 0:
            d2 = (x_next - denoiser(x_next, torch.tensor(s_next, dtype=torch.float64))) / s_next
            x_next = x + (s_next - s_hat) * 0.5 * (d + d2)
        x = x_next
        if not torch.isfinite(x).all():
            raise SamplingDiverged(f"non-finite sampler state at step {i}")
        if trajectory is not None:
            trajectory.append((i, s_next, float(x.norm(dim=1).mean())))
    return x.numpy()


def write_trajectory(trajectory: list, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sigma", "mean_norm"])
        w.writerows(trajectory)


def write_training_log(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "mean_sigma"])
        w.writeheader()
        w.writerows(history)


def build_denoiser(dim: int, cfg: DiffusionConfig, sigma_data: float, seed: int) -> Denoiser:
    with seeded(seed):
        return Denoiser(DenoiserMLP(dim, cfg.hidden, cfg.emb_dim), sigma_data)


def fit_diffusion(z: np.ndarray, schedule: NoiseSchedule, cfg: DiffusionConfig,
                  seed: int = 0) -> tuple[Denoiser, list[dict]]:
    """Minibatch AdamW on the denoising loss for ``cfg.total_steps(len(z))`` optimizer steps."""
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("need a non-empty (n, dim) latent matrix")
    model = build_denoiser(z.shape[1], cfg, schedule.sigma_data, seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(seed + 1)
    history = []
    perm, cursor = torch.randperm(len(z), generator=gen), 0
    for step in range(cfg.total_steps(len(z))):
        if cursor >= len(z):
            perm, cursor = torch.randperm(len(z), generator=gen), 0
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = z[idx]
        sigma = draw_sigmas(schedule, len(batch), gen)
        try:
            loss = denoise_loss(model, batch, schedule, gen, sigma=sigma)
        except FloatingPointError as exc:
            raise FloatingPointError(f"diffusion training diverged at step {step + 1}: {exc}") from exc
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss": float(loss.detach()), "mean_sigma": float(sigma.mean())})
    model.eval()
    return model, history
