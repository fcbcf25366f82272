"""Show where each encoded feature lands on the DeepInsight grid.

Fits the layout on the toy train split, prints the grid with feature indices,
and writes the mean benign and attack images as PGM files.
"""
import argparse
import os

import numpy as np

from mmsynth import dataio, deepinsight
from mmsynth.datasets import make_toy_frame


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--projector", choices=("tsne", "pca"), default="tsne")
    ap.add_argument("--out", default="pixel_layout_out")
    args = ap.parse_args()

    frame, schema = make_toy_frame(2000, seed=0)
    parts = dataio.split(len(frame), seed=0)
    train = dataio.subset(frame, parts.train)
    pre = dataio.fit_preprocessor(train, schema)
    x = pre.transform(train)
    pm = deepinsight.fit_pixel_map(x, (10, 10), seed=0, projector=args.projector)

    names = pre.numeric_columns + pre.categorical_columns
    grid = [["  ." for _ in range(pm.grid_w)] for _ in range(pm.grid_h)]
    for f, (r, c) in enumerate(pm.assignment):
        grid[r][c] = f"{f:3d}" if grid[r][c] == "  ." else "  *"
    print(f"rotation {np.degrees(pm.rotation):.1f} deg; * marks a shared cell")
    print("\n".join("".join(row) for row in grid))
    for f, name in enumerate(names):
        print(f"{f:3d} {name:12s} cell {pm.assignment[f]}")

    os.makedirs(args.out, exist_ok=True)
    images = deepinsight.render_batch(pm, x)
    for tag in ("benign", "attack"):
        mean_img = images[(train["label"] == tag).to_numpy()].mean(axis=0)
        deepinsight.write_pgm(os.path.join(args.out, f"mean_{tag}.pgm"), mean_img)
    print(f"mean class images written to {args.out}/")


if __name__ == "__main__":
    main()
