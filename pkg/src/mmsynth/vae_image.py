"""Convolutional VAE over single-channel feature images."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._training import seeded, train_vae, write_log_csv
from .vae_tabular import Posterior, gaussian_kl, reparameterize

LOG_FIELDS = ["epoch", "total", "mse", "kl", "beta", "val_total"]


@dataclass
class ImageVAEConfig:
    blocks: tuple[int, ...] = (32, 64, 128)
    latent_dim: int = 64
    grid: tuple[int, int] = (10, 10)
    beta_start: float = 1.0
    beta_end: float = 0.1
    anneal_fraction: float = 0.3
    epochs: int = 4000
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 2048

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.grid = tuple(int(g) for g in self.grid)
        if not self.blocks:
            raise ValueError("blocks must be non-empty")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if not 0 < self.anneal_fraction <= 1:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.beta_end > self.beta_start:
            raise ValueError("beta_end must not exceed beta_start")

    def to_dict(self) -> dict:
        return asdict(self)


class ImageVAE(nn.Module):
    """Stride-2 conv blocks down (10 -> 5 -> 3 -> 2 for the default grid), a
    mirrored transposed-conv decoder whose output is clamped to [0, 1].

    Training scores the unclamped decoder output. Feature images are sparse
    (most cells are empty in every row), and a sigmoid head trained with MSE
    saturates: the shared kernels push every cell towards zero, the few
    active cells go with them and their gradient vanishes. For targets in
    [0, 1] clamping can only shrink the error, so the unclamped loss is an
    upper bound on the reconstruction error of the clamped images.
    """

    def __init__(self, cfg: ImageVAEConfig):
        super().__init__()
        self.cfg = cfg
        sizes = [tuple(cfg.grid)]
        for _ in cfg.blocks:
            sizes.append(tuple(math.ceil(s / 2) for s in sizes[-1]))
        self.sizes = sizes

        enc, c_in = [], 1
        for c in cfg.blocks:
            enc += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.SiLU()]
            c_in = c
        self.encoder = nn.Sequential(*enc, nn.Flatten())
        flat = cfg.blocks[-1] * sizes[-1][0] * sizes[-1][1]
        self.to_mu = nn.Linear(flat, cfg.latent_dim)
        self.to_logvar = nn.Linear(flat, cfg.latent_dim)

        self.from_latent = nn.Linear(cfg.latent_dim, flat)
        dec = []
        chans = list(cfg.blocks[::-1]) + [cfg.blocks[0]]
        for i in range(len(cfg.blocks)):
            (hi, wi), (ho, wo) = sizes[-1 - i], sizes[-2 - i]
            pad = (ho - (2 * hi - 1), wo - (2 * wi - 1))
            dec += [nn.ConvTranspose2d(chans[i], chans[i + 1], 3, stride=2, padding=1, output_padding=pad), nn.SiLU()]
        dec += [nn.Conv2d(cfg.blocks[0], 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def _as_input(self, images) -> torch.Tensor:
        x = torch.as_tensor(images, dtype=self.to_mu.weight.dtype)
        if x.ndim == 3:
            x = x.unsqueeze(1)
        h, w = self.cfg.grid
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, h, w):
            raise ValueError(f"expected images of shape (n, {h}, {w}), got {tuple(x.shape)}")
        if x.numel() and (not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        return x

    def encode(self, images) -> Posterior:
        h = self.encoder(self._as_input(images))
        return Posterior(self.to_mu(h), self.to_logvar(h))

    def decode_raw(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=self.to_mu.weight.dtype)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of width {self.latent_dim}, got shape {tuple(z.shape)}")
        c = self.cfg.blocks[-1]
        h, w = self.sizes[-1]
        x = self.from_latent(z).view(len(z), c, h, w)
        return self.decoder(x)[:, 0]

    def decode(self, z) -> torch.Tensor:
        """Images of shape ``(n, grid_h, grid_w)`` with values in [0, 1]."""
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, images, generator: torch.Generator | None = None):
        """Unclamped reconstruction and posterior; the training view of the model."""
        post = self.encode(images)
        z = reparameterize(post, generator) if generator is not None else post.mu
        return self.decode_raw(z), post


def image_loss(images: torch.Tensor, recon: torch.Tensor, post: Posterior, beta: float):
    """Returns ``(total, mse, kl)``: per-pixel mean squared error plus beta * KL."""
    if images.ndim == 4:
        images = images[:, 0]
    mse = F.mse_loss(recon, images)
    kl = gaussian_kl(post.mu, post.logvar)
    return mse + beta * kl, mse, kl


def _step_loss(model: ImageVAE, batch: torch.Tensor, beta: float, gen):
    recon, post = model(batch, gen)
    total, mse, kl = image_loss(batch, recon, post, beta)
    return total, {"mse": mse.detach(), "kl": kl.detach()}


def build_image_vae(cfg: ImageVAEConfig, seed: int) -> ImageVAE:
    with seeded(seed):
        return ImageVAE(cfg)


def fit_image_vae(train: np.ndarray, val: np.ndarray | None, cfg: ImageVAEConfig,
                  seed: int = 0) -> tuple[ImageVAE, list[dict]]:
    model = build_image_vae(cfg, seed)
    x_train = model._as_input(train)
    x_val = model._as_input(val) if val is not None and len(val) else None
    history = train_vae(model, x_train, x_val, _step_loss, cfg, seed + 1, "image VAE")
    return model, history


def write_training_log(history: list[dict], path: str | os.PathLike) -> None:
    write_log_csv(history, path, LOG_FIELDS)
