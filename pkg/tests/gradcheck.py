"""Central finite differences over every parameter of a small double-precision model."""
import numpy as np
import torch


def compare_gradients(model, loss_fn, h=1e-6, abs_floor=1e-9):
    """Return the worst elementwise relative error between autograd and finite differences.

    ``loss_fn()`` must be a deterministic function of the model parameters.
    Entries where both gradients are below ``abs_floor`` count as agreeing.
    """
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        numeric = torch.zeros_like(analytic)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        diff = (analytic - numeric).abs()
        scale = torch.maximum(analytic.abs(), numeric.abs())
        rel = torch.where(scale <= abs_floor, torch.zeros_like(diff), diff / scale.clamp_min(1e-300))
        worst = max(worst, float(rel.max()))
    return worst


def n_params(model):
    return int(sum(np.prod(p.shape) for p in model.parameters()))
