"""Train per-class pipelines on the toy flow table and print one metrics row.

Uses the Python API directly (the CLI does the same through run directories).
Takes a few minutes on one CPU core with the desk preset; pass --fast for a
seconds-long smoke run with tiny models.
"""
import argparse
import dataclasses
import time

import torch

from mmsynth import dataio, evaluate_dataset, synth
from mmsynth.config import preset
from mmsynth.datasets import make_toy_frame


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fast", action="store_true", help="tiny models and few epochs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = preset("desk")
    if args.fast:
        cfg.tabular_vae = dataclasses.replace(cfg.tabular_vae, epochs=20, n_layers=1)
        cfg.image_vae = dataclasses.replace(cfg.image_vae, epochs=20)
        cfg.diffusion = dataclasses.replace(cfg.diffusion, steps=100)
        cfg.deepinsight.projector = "pca"

    frame, schema = make_toy_frame(2000, seed=args.seed)
    parts = dataio.split(len(frame), seed=args.seed)
    train, val, test = (dataio.subset(frame, parts.indices(s)) for s in ("train", "val", "test"))
    pre = dataio.fit_preprocessor(train, schema)
    print(f"rows: train {len(train)}, val {len(val)}, test {len(test)}; encoded width {pre.n_features}")

    t0 = time.perf_counter()
    bundles = synth.train_per_class(train, val, schema, cfg.pipeline(), args.seed, pre)
    print(f"trained {len(bundles)} class pipelines in {time.perf_counter() - t0:.0f}s")

    counts = synth.target_counts(train["label"].value_counts().to_dict(), len(train))
    ds = synth.balance(bundles, counts, seed=args.seed)
    print(f"generated {len(ds)} rows {counts}; image/row consistency mse {ds.consistency_mse:.4f}")
    print(ds.rows.head().to_string())

    report = evaluate_dataset(ds, pre, train, test, cfg.evaluation())
    print()
    print(report.to_csv(), end="")


if __name__ == "__main__":
    main()
