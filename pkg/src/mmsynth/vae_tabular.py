"""Transformer VAE over mixed-type rows.

Each column becomes a token (numeric: per-column affine embedding of the
scalar; categorical: embedding lookup), a learnable CLS token is prepended and
the CLS output alone parameterises the Gaussian posterior. The decoder is a
two-layer feedforward trunk with one regression head over the numeric columns
and one logit head per categorical column.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._training import beta_schedule, seeded, train_vae, write_log_csv

__all__ = [
    "Posterior", "TabularVAEConfig", "TabularVAE", "beta_schedule", "gaussian_kl", "reparameterize",
    "tabular_loss", "fit_tabular_vae", "LOG_FIELDS",
]

LOG_FIELDS = ["epoch", "total", "mse", "ce", "kl", "beta", "val_total"]


class Posterior(NamedTuple):
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass
class TabularVAEConfig:
    n_layers: int = 3
    n_heads: int = 4
    token_dim: int = 32
    latent_dim: int = 64
    decoder_hidden: int = 256
    beta_start: float = 1.0
    beta_end: float = 0.1
    anneal_fraction: float = 0.3
    epochs: int = 4000
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 2048

    def __post_init__(self):
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if not 0 < self.anneal_fraction <= 1:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.beta_end > self.beta_start:
            raise ValueError("beta_end must not exceed beta_start")
        if self.token_dim % self.n_heads:
            raise ValueError("token_dim must be divisible by n_heads")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over rows."""
    per_row = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum(dim=-1)
    return per_row.mean()


def reparameterize(post: Posterior, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(post.mu.shape, generator=generator, dtype=post.mu.dtype)
    return post.mu + torch.exp(0.5 * post.logvar) * eps


class TabularVAE(nn.Module):
    def __init__(self, n_numeric: int, cardinalities: Sequence[int], cfg: TabularVAEConfig):
        super().__init__()
        if n_numeric + len(cardinalities) == 0:
            raise ValueError("need at least one feature column")
        self.n_numeric = n_numeric
        self.cardinalities = [int(c) for c in cardinalities]
        self.cfg = cfg
        d = cfg.token_dim

        self.num_weight = nn.Parameter(torch.randn(n_numeric, d) / d ** 0.5)
        self.num_bias = nn.Parameter(torch.zeros(n_numeric, d))
        # one spare row per column for codes mapped to "unknown" at transform time
        offsets = np.concatenate([[0], np.cumsum([c + 1 for c in self.cardinalities])])
        self.register_buffer("cat_offsets", torch.as_tensor(offsets[:-1], dtype=torch.long))
        self.cat_embed = nn.Embedding(max(int(offsets[-1]), 1), d)
        nn.init.normal_(self.cat_embed.weight, std=d ** -0.5)
        self.cls = nn.Parameter(torch.randn(1, 1, d) * 0.02)

        layer = nn.TransformerEncoderLayer(d_model=d, nhead=cfg.n_heads, dim_feedforward=4 * d, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.n_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.to_mu = nn.Linear(d, cfg.latent_dim)
        self.to_logvar = nn.Linear(d, cfg.latent_dim)

        h = cfg.decoder_hidden
        self.trunk = nn.Sequential(nn.Linear(cfg.latent_dim, h), nn.SiLU(), nn.Linear(h, h), nn.SiLU())
        self.num_head = nn.Linear(h, n_numeric)
        self.cat_head = nn.Linear(h, sum(self.cardinalities))

    @property
    def n_columns(self) -> int:
        return self.n_numeric + len(self.cardinalities)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def _as_input(self, rows) -> torch.Tensor:
        x = torch.as_tensor(rows, dtype=self.num_weight.dtype)
        if x.ndim != 2 or x.shape[1] != self.n_columns:
            raise ValueError(f"expected rows of width {self.n_columns}, got shape {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in encoder input")
        return x

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        x_num = x[:, :self.n_numeric]
        parts = [x_num.unsqueeze(-1) * self.num_weight + self.num_bias]
        if self.cardinalities:
            codes = x[:, self.n_numeric:].round().long() + self.cat_offsets
            parts.append(self.cat_embed(codes))
        cls = self.cls.expand(len(x), -1, -1)
        return torch.cat([cls] + parts, dim=1)

    def encode(self, rows) -> Posterior:
        x = self._as_input(rows)
        h = self.encoder(self.tokens(x))
        summary = self.norm(h[:, 0])
        return Posterior(self.to_mu(summary), self.to_logvar(summary))

    def decode(self, z) -> tuple[torch.Tensor, list[torch.Tensor]]:
        z = torch.as_tensor(z, dtype=self.num_weight.dtype)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of width {self.latent_dim}, got shape {tuple(z.shape)}")
        h = self.trunk(z)
        logits = self.cat_head(h)
        return self.num_head(h), list(torch.split(logits, self.cardinalities, dim=1))

    def forward(self, rows, generator: torch.Generator | None = None):
        post = self.encode(rows)
        z = reparameterize(post, generator) if generator is not None else post.mu
        num, logits = self.decode(z)
        return num, logits, post


def tabular_loss(rows: torch.Tensor, num_pred: torch.Tensor, cat_logits: list[torch.Tensor], post: Posterior,
                 beta: float, n_numeric: int | None = None):
    """Returns ``(total, mse, ce, kl)`` with total = mse + ce + beta * kl.

    mse averages over numeric entries, ce is the mean of per-column cross
    entropies, kl is the closed-form Gaussian KL averaged over rows.
    """
    n_numeric = num_pred.shape[1] if n_numeric is None else n_numeric
    zero = rows.new_zeros(())
    mse = F.mse_loss(num_pred, rows[:, :n_numeric]) if n_numeric else zero
    if cat_logits:
        codes = rows[:, n_numeric:].round().long()
        ce = torch.stack([F.cross_entropy(lg, codes[:, j]) for j, lg in enumerate(cat_logits)]).mean()
    else:
        ce = zero
    kl = gaussian_kl(post.mu, post.logvar)
    return mse + ce + beta * kl, mse, ce, kl


def _step_loss(model: TabularVAE, batch: torch.Tensor, beta: float, gen):
    num, logits, post = model(batch, gen)
    total, mse, ce, kl = tabular_loss(batch, num, logits, post, beta, model.n_numeric)
    return total, {"mse": mse.detach(), "ce": ce.detach(), "kl": kl.detach()}


def build_tabular_vae(n_numeric: int, cardinalities: Sequence[int], cfg: TabularVAEConfig, seed: int) -> TabularVAE:
    with seeded(seed):
        return TabularVAE(n_numeric, cardinalities, cfg)


def fit_tabular_vae(train: np.ndarray, val: np.ndarray | None, n_numeric: int, cardinalities: Sequence[int],
                    cfg: TabularVAEConfig, seed: int = 0) -> tuple[TabularVAE, list[dict]]:
    """Train from scratch on encoded matrices (numeric columns first)."""
    model = build_tabular_vae(n_numeric, cardinalities, cfg, seed)
    x_train = model._as_input(train)
    x_val = model._as_input(val) if val is not None and len(val) else None
    history = train_vae(model, x_train, x_val, _step_loss, cfg, seed + 1, "tabular VAE")
    return model, history


def write_training_log(history: list[dict], path: str | os.PathLike) -> None:
    write_log_csv(history, path, LOG_FIELDS)
