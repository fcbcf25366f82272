"""Synthetic mixed-type datasets for smoke tests and demos."""
from __future__ import annotations

import numpy as np
import pandas as pd

from .dataio import CATEGORICAL, NUMERIC, FeatureSchema

TOY_NUMERIC = ["duration", "src_bytes", "dst_bytes", "pkt_rate", "mean_iat", "flag_ratio"]
TOY_CATEGORICAL = ["protocol", "service"]


def make_toy_frame(n: int = 2000, seed: int = 0, attack_fraction: float = 0.2) -> tuple[pd.DataFrame, FeatureSchema]:
    """Two-class flow-like table: 6 skewed numerics, 2 categoricals, label column.

    Attack rows are shifted in log-scale on several numerics and favour
    different protocol/service values, so the classes are learnable but overlap.
    """
    rng = np.random.default_rng(seed)
    n_attack = int(round(attack_fraction * n))
    y = np.array(["attack"] * n_attack + ["benign"] * (n - n_attack))
    y = y[rng.permutation(n)]
    is_attack = y == "attack"

    cov = np.full((6, 6), 0.35) + 0.65 * np.eye(6)
    base = rng.multivariate_normal(np.zeros(6), cov, size=n)
    shift = np.array([1.0, -1.2, 0.8, 1.5, -1.0, 0.0])
    z = base + np.outer(is_attack, shift)
    numerics = {
        "duration": np.exp(1.0 + 0.8 * z[:, 0]),
        "src_bytes": np.round(np.exp(6.0 + 1.0 * z[:, 1])),
        "dst_bytes": np.round(np.exp(5.0 + 1.2 * z[:, 2])),
        "pkt_rate": 50.0 + 20.0 * z[:, 3],
        "mean_iat": np.exp(0.5 * z[:, 4]),
        "flag_ratio": 1.0 / (1.0 + np.exp(-z[:, 5])),
    }

    protocols = np.array(["icmp", "tcp", "udp"])
    p_proto = np.where(is_attack[:, None], [0.15, 0.75, 0.10], [0.05, 0.55, 0.40])
    services = np.array(["dns", "ftp", "http", "other"])
    p_serv = np.where(is_attack[:, None], [0.05, 0.30, 0.55, 0.10], [0.35, 0.05, 0.40, 0.20])
    u1, u2 = rng.random(n), rng.random(n)
    proto = protocols[(u1[:, None] > np.cumsum(p_proto, axis=1)).sum(axis=1)]
    serv = services[(u2[:, None] > np.cumsum(p_serv, axis=1)).sum(axis=1)]

    frame = pd.DataFrame(numerics)
    frame["protocol"] = proto
    frame["service"] = serv
    frame["label"] = y
    schema = FeatureSchema(
        columns=[(c, NUMERIC) for c in TOY_NUMERIC]
        + [(c, CATEGORICAL) for c in TOY_CATEGORICAL]
        + [("label", CATEGORICAL)],
        vocab={
            "protocol": sorted(np.unique(proto).tolist()),
            "service": sorted(np.unique(serv).tolist()),
            "label": sorted(np.unique(y).tolist()),
        },
        label="label",
    )
    return frame, schema
