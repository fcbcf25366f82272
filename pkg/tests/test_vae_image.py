import math

import numpy as np
import pytest
import torch

from gradcheck import compare_gradients, n_params
from mmsynth._training import beta_schedule
from mmsynth.vae_image import ImageVAEConfig, build_image_vae, fit_image_vae, image_loss
from mmsynth.vae_tabular import Posterior, gaussian_kl


def test_config_defaults_and_validation():
    cfg = ImageVAEConfig()
    assert cfg.blocks == (32, 64, 128) and cfg.latent_dim == 64 and cfg.grid == (10, 10)
    with pytest.raises(ValueError):
        ImageVAEConfig(blocks=())
    with pytest.raises(ValueError):
        ImageVAEConfig(latent_dim=0)


def test_encoder_spatial_path():
    model = build_image_vae(ImageVAEConfig(), 0)
    assert model.sizes == [(10, 10), (5, 5), (3, 3), (2, 2)]


def test_encode_shape_and_finiteness(rng):
    model = build_image_vae(ImageVAEConfig(), 0)
    post = model.encode(rng.uniform(size=(3, 10, 10)))
    assert post.mu.shape == (3, 64) and torch.isfinite(post.mu).all() and torch.isfinite(post.logvar).all()


def test_decode_is_bounded_for_random_latents():
    model = build_image_vae(ImageVAEConfig(latent_dim=8), 0)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(25.0)  # blow the decoder output far outside [0, 1]
    with torch.no_grad():
        img = model.decode(torch.randn(64, 8) * 10)
    assert img.shape == (64, 10, 10)
    assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0


def test_rejects_bad_images(rng):
    model = build_image_vae(ImageVAEConfig(latent_dim=4), 0)
    with pytest.raises(ValueError, match="shape"):
        model.encode(rng.uniform(size=(2, 9, 10)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        model.encode(rng.uniform(size=(2, 10, 10)) + 1.0)
    with pytest.raises(ValueError, match="width"):
        model.decode(torch.zeros(2, 5))


def test_loss_zero_at_perfect_reconstruction(rng):
    img = torch.as_tensor(rng.uniform(size=(2, 10, 10)))
    post = Posterior(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64))
    total, mse, kl = image_loss(img, img.clone(), post, beta=0.5)
    assert float(total) == 0.0


def test_kl_shared_with_tabular(rng):
    post = Posterior(torch.as_tensor(rng.normal(size=(3, 5))), torch.as_tensor(rng.normal(size=(3, 5))))
    img = torch.zeros(3, 10, 10, dtype=torch.float64)
    _, _, kl = image_loss(img, img, post, 1.0)
    assert float(kl) == float(gaussian_kl(post.mu, post.logvar))


def test_loss_matches_scalar_reimplementation(rng):
    img = rng.uniform(size=(3, 10, 10))
    rec = rng.uniform(size=(3, 10, 10))
    mu, lv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    total, mse, kl = image_loss(torch.as_tensor(img), torch.as_tensor(rec),
                                Posterior(torch.as_tensor(mu), torch.as_tensor(lv)), 0.25)
    mse_ref = sum((rec[b, i, j] - img[b, i, j]) ** 2 for b in range(3) for i in range(10) for j in range(10)) / 300
    kl_ref = sum(0.5 * (mu[b, k] ** 2 + math.exp(lv[b, k]) - lv[b, k] - 1) for b in range(3) for k in range(4)) / 3
    assert abs(float(mse) - mse_ref) < 1e-10
    assert abs(float(kl) - kl_ref) < 1e-10
    assert abs(float(total) - (mse_ref + 0.25 * kl_ref)) < 1e-10


def test_gradients_match_finite_differences(rng):
    cfg = ImageVAEConfig(blocks=(2,), latent_dim=2, grid=(4, 4))
    model = build_image_vae(cfg, 7).double()
    assert n_params(model) <= 200
    imgs = torch.as_tensor(rng.uniform(size=(3, 4, 4)))

    def loss():
        rec, post = model(imgs, torch.Generator().manual_seed(0))
        return image_loss(imgs, rec, post, 0.37)[0]

    assert compare_gradients(model, loss) <= 1e-3


def test_overfit_eight_images(rng):
    imgs = rng.uniform(size=(8, 10, 10))
    cfg = ImageVAEConfig(latent_dim=8, epochs=600, lr=2e-3, batch_size=8, beta_start=1e-3, beta_end=1e-5)
    model, hist = fit_image_vae(imgs, None, cfg, seed=0)
    with torch.no_grad():
        rec = model.decode(model.encode(imgs).mu).numpy()
    assert np.mean((rec - imgs) ** 2) < 1e-3
    assert hist[-1]["total"] < 0.1 * hist[0]["total"]


def test_training_is_deterministic(rng):
    imgs = rng.uniform(size=(20, 10, 10))
    cfg = ImageVAEConfig(blocks=(4, 8), latent_dim=3, epochs=5, batch_size=8)
    _, h1 = fit_image_vae(imgs, imgs[:4], cfg, seed=2)
    _, h2 = fit_image_vae(imgs, imgs[:4], cfg, seed=2)
    assert h1 == h2
    assert [r["beta"] for r in h1] == [beta_schedule(i, 5) for i in range(5)]
