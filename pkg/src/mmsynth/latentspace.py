"""Joint standardized latent space built from K posterior draws per row."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class WhiteningStats:
    mean: np.ndarray
    std: np.ndarray
    segments: tuple[tuple[int, int], tuple[int, int]]  # (tab_start, tab_end), (img_start, img_end)
    flagged: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "segments": [list(s) for s in self.segments],
            "flagged": list(self.flagged),
        }

    @classmethod
    def from_dict(cls, d) -> "WhiteningStats":
        tab, img = d["segments"]
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   (tuple(tab), tuple(img)), tuple(d.get("flagged", ())))


@dataclass(frozen=True)
class LatentBlock:
    z: np.ndarray  # (N*K, D) standardized joint latents
    stats: WhiteningStats
    k: int
    row_of: np.ndarray  # latent index -> source row

    @property
    def raw(self) -> np.ndarray:
        return unwhiten(self.stats, self.z)


def fit_whitening(raw: np.ndarray, segments) -> WhiteningStats:
    """Per-dimension population mean/std; near-constant dims get std 1."""
    raw = np.asarray(raw, dtype=np.float64)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    flagged = tuple(int(i) for i in np.flatnonzero(std < SIGMA_FLOOR))
    if flagged:
        log.warning("latent dims %s are near-constant; leaving them unscaled", list(flagged))
        std = std.copy()
        std[list(flagged)] = 1.0
    return WhiteningStats(mean, std, segments, flagged)


def whiten(stats: WhiteningStats, z_raw: np.ndarray) -> np.ndarray:
    z_raw = np.asarray(z_raw, dtype=np.float64)
    _check_dim(stats, z_raw)
    return (z_raw - stats.mean) / stats.std


def unwhiten(stats: WhiteningStats, z_std: np.ndarray) -> np.ndarray:
    z_std = np.asarray(z_std, dtype=np.float64)
    _check_dim(stats, z_std)
    return z_std * stats.std + stats.mean


def split_segments(stats: WhiteningStats, z_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _check_dim(stats, z_raw)
    (t0, t1), (i0, i1) = stats.segments
    return z_raw[:, t0:t1], z_raw[:, i0:i1]


def _check_dim(stats: WhiteningStats, z: np.ndarray) -> None:
    if z.ndim != 2 or z.shape[1] != stats.dim:
        raise ValueError(f"expected latents of width {stats.dim}, got shape {z.shape}")


@torch.no_grad()
def build_latents(tab_vae, img_vae, rows: np.ndarray, images: np.ndarray, k: int = 3, seed: int = 0) -> LatentBlock:
    """Draw ``k`` reparameterized samples per row from both posteriors, pair
    them draw-by-draw, concatenate (tabular first) and standardize.

    Latent ``i * k + j`` is draw ``j`` of source row ``i``.
    """
    if len(rows) != len(images):
        raise ValueError(f"rows ({len(rows)}) and images ({len(images)}) are not paired")
    if k < 1:
        raise ValueError("k must be at least 1")
    for name, vae in (("tabular", tab_vae), ("image", img_vae)):
        if vae is None or vae.training:
            raise ValueError(f"{name} VAE must be fitted and in eval mode")
    tab_vae.eval()
    img_vae.eval()
    tab_post = tab_vae.encode(rows)
    img_post = img_vae.encode(images)
    n, d_tab, d_img = len(rows), tab_vae.latent_dim, img_vae.latent_dim

    gen = torch.Generator().manual_seed(seed)
    eps_tab = torch.randn((n, k, d_tab), generator=gen, dtype=torch.float64)
    eps_img = torch.randn((n, k, d_img), generator=gen, dtype=torch.float64)
    z_tab = tab_post.mu.double()[:, None] + torch.exp(0.5 * tab_post.logvar.double())[:, None] * eps_tab
    z_img = img_post.mu.double()[:, None] + torch.exp(0.5 * img_post.logvar.double())[:, None] * eps_img
    raw = torch.cat([z_tab, z_img], dim=-1).reshape(n * k, d_tab + d_img).numpy()

    stats = fit_whitening(raw, ((0, d_tab), (d_tab, d_tab + d_img)))
    return LatentBlock(z=whiten(stats, raw), stats=stats, k=k, row_of=np.repeat(np.arange(n), k))
