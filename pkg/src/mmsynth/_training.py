"""Minibatch loop shared by the two VAEs."""
from __future__ import annotations

import copy
import csv
import math
import os
from contextlib import contextmanager
from typing import Callable

import torch


class TrainingDiverged(RuntimeError):
    def __init__(self, what: str, where: str):
        super().__init__(f"{what}: non-finite loss at {where}")
        self.what = what
        self.where = where


@contextmanager
def seeded(seed: int):
    """Seed torch's global RNG inside the block and restore it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def beta_schedule(epoch: int, total_epochs: int, beta_start: float = 1.0, beta_end: float = 0.1,
                  anneal_fraction: float = 0.3) -> float:
    """KL weight: linear from ``beta_start`` to ``beta_end`` over the first
    ``floor(anneal_fraction * total_epochs)`` epochs, flat afterwards."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    anneal_end = math.floor(anneal_fraction * total_epochs)
    if epoch >= anneal_end:
        return float(beta_end)
    return float(beta_start + (beta_end - beta_start) * epoch / anneal_end)


LossFn = Callable[[torch.nn.Module, torch.Tensor, float, "torch.Generator | None"], tuple[torch.Tensor, dict]]


def train_vae(model: torch.nn.Module, train: torch.Tensor, val: torch.Tensor | None, loss_fn: LossFn,
              cfg, seed: int, what: str) -> list[dict]:
    """AdamW minibatch training with the annealed KL weight.

    ``loss_fn(model, batch, beta, generator)`` returns ``(total, parts)``;
    with ``generator=None`` it must use the posterior mean (no sampling).
    The parameters with the lowest validation total at ``beta_end`` are
    restored at the end. Returns one log dict per epoch.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(train)
    history: list[dict] = []
    best_val, best_state = math.inf, None
    for epoch in range(cfg.epochs):
        beta = beta_schedule(epoch, cfg.epochs, cfg.beta_start, cfg.beta_end, cfg.anneal_fraction)
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            batch = train[perm[start:start + cfg.batch_size]]
            total, parts = loss_fn(model, batch, beta, gen)
            if not torch.isfinite(total):
                raise TrainingDiverged(what, f"epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            w = len(batch) / n
            sums["total"] = sums.get("total", 0.0) + w * float(total.detach())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + w * float(v)
        row = {"epoch": epoch + 1, **sums, "beta": beta}
        if val is not None and len(val):
            model.eval()
            with torch.no_grad():
                val_total, _ = loss_fn(model, val, cfg.beta_end, None)
            row["val_total"] = float(val_total)
            if not math.isfinite(row["val_total"]):
                raise TrainingDiverged(what, f"epoch {epoch + 1} (validation)")
            if row["val_total"] < best_val:
                best_val = row["val_total"]
                best_state = copy.deepcopy(model.state_dict())
        history.append(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def write_log_csv(history: list[dict], path: str | os.PathLike, fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in fields})
