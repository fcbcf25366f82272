"""Command-line entry point: ``mmsynth prepare | train | sample | evaluate``.

All commands share a run directory (``--out`` or ``[run] out_dir``)::

    prepared/   train.idx val.idx test.idx schema.json preprocessor.json
    bundles/    index.json and one <class>.bundle per class (or model.bundle)
    logs/       per-stage training curves as CSV
    synthetic/  rows.csv, images/*.pgm, manifest.json
    report/     report.json report.csv radar.csv

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from contextlib import contextmanager

from . import dataio, edm, synth, vae_image, vae_tabular
from ._training import TrainingDiverged
from .config import ConfigError, RunConfig, load_config, preset
from .dataio import DataError, FeatureSchema, LeakageError, Preprocessor
from .edm import SamplingDiverged
from .evalkit import evaluate_dataset
from .synth import BundleError, ModelBundle, PipelineError

log = logging.getLogger("mmsynth")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "MMSYNTH_LOG_LEVEL"
SPLITS = ("train", "val", "test")


class UsageError(ValueError):
    """Bad arguments or missing inputs; reported with exit code 1."""


@contextmanager
def staged_dir(final: str):
    """Yield a temp directory next to ``final`` and move it into place on success."""
    final = os.path.abspath(final)
    os.makedirs(os.path.dirname(final), exist_ok=True)
    tmp = tempfile.mkdtemp(dir=os.path.dirname(final), prefix=f".tmp-{os.path.basename(final)}-")
    try:
        yield tmp
        if os.path.exists(final):
            shutil.rmtree(final)
        os.replace(tmp, final)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _safe_name(tag: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", tag) or "_"


def _run_config(args) -> RunConfig:
    if args.config is None:
        return preset("desk")
    if args.config in ("desk", "full") and not os.path.exists(args.config):
        return preset(args.config)
    return load_config(args.config)


def _seed(args, cfg: RunConfig, fallback: int) -> int:
    return args.seed if args.seed is not None else fallback


def _out(args, cfg: RunConfig) -> str:
    return args.out or cfg.run.out_dir


class Prepared:
    """Artifacts written by ``prepare`` plus the real frames they index."""

    def __init__(self, run_dir: str, cfg: RunConfig):
        base = os.path.join(run_dir, "prepared")
        needed = [f"{s}.idx" for s in SPLITS] + ["schema.json", "preprocessor.json"]
        missing = [n for n in needed if not os.path.isfile(os.path.join(base, n))]
        if missing:
            raise UsageError(f"prepared artifacts missing in {base}: {missing}; run `mmsynth prepare` first")
        with open(os.path.join(base, "schema.json"), encoding="utf-8") as fh:
            self.schema = FeatureSchema.from_dict(json.load(fh))
        self.preprocessor = Preprocessor.load(os.path.join(base, "preprocessor.json"))
        self.indices = {s: dataio.read_indices(os.path.join(base, f"{s}.idx")) for s in SPLITS}
        frame, _ = dataio.load_csv(cfg.data.path, schema=self.schema)
        self.frames = {s: dataio.subset(frame, idx) for s, idx in self.indices.items()}


def cmd_prepare(args) -> int:
    cfg = _run_config(args)
    if not cfg.data.path:
        raise UsageError("[data] path is not set")
    seed = _seed(args, cfg, cfg.split.seed)
    frame, schema = dataio.load_csv(cfg.data.path, label=cfg.data.label or None,
                                    categorical_threshold=cfg.data.categorical_threshold)
    parts = dataio.split(len(frame), seed)
    train = dataio.subset(frame, parts.train)
    pre = dataio.fit_preprocessor(train, schema, "train", unknown=cfg.data.unknown, max_grid=cfg.data.quantile_grid)
    with staged_dir(os.path.join(_out(args, cfg), "prepared")) as tmp:
        for name in SPLITS:
            dataio.write_indices(parts.indices(name), os.path.join(tmp, f"{name}.idx"))
        dataio.save_json(pre.schema.to_dict(), os.path.join(tmp, "schema.json"))
        pre.save(os.path.join(tmp, "preprocessor.json"))
    log.info("prepared %d/%d/%d rows (seed %d)", len(parts.train), len(parts.val), len(parts.test), seed)
    return EXIT_OK


def _write_logs(bundle: ModelBundle, log_dir: str, stem: str) -> None:
    edm.write_training_log(bundle.logs["diffusion"], os.path.join(log_dir, f"{stem}-diffusion.csv"))
    vae_image.write_training_log(bundle.logs["image"], os.path.join(log_dir, f"{stem}-image.csv"))
    vae_tabular.write_training_log(bundle.logs["tabular"], os.path.join(log_dir, f"{stem}-tabular.csv"))


def cmd_train(args) -> int:
    cfg = _run_config(args)
    run_dir = _out(args, cfg)
    prep = Prepared(run_dir, cfg)
    seed = _seed(args, cfg, cfg.run.seed)
    pipe = cfg.pipeline()
    train, val = prep.frames["train"], prep.frames["val"]
    if cfg.data.per_class:
        if prep.schema.label is None:
            raise UsageError("[data] per_class needs a label column")
        bundles = synth.train_per_class(train, val, prep.schema, pipe, seed, prep.preprocessor)
    else:
        bundles = {"": synth.train_pipeline(train, val, prep.schema, pipe, seed, prep.preprocessor)}

    index = {"per_class": cfg.data.per_class, "seed": seed, "bundles": {}}
    with staged_dir(os.path.join(run_dir, "bundles")) as tmp_b, staged_dir(os.path.join(run_dir, "logs")) as tmp_l:
        for i, (tag, bundle) in enumerate(sorted(bundles.items())):
            stem = f"{i:02d}-{_safe_name(tag)}" if tag else "model"
            sha = bundle.save(os.path.join(tmp_b, f"{stem}.bundle"))
            index["bundles"][stem] = {"class": tag or None, "file": f"{stem}.bundle", "sha256": sha}
            _write_logs(bundle, tmp_l, stem)
            log.info("bundle %s: %s", stem, sha)
        dataio.save_json(index, os.path.join(tmp_b, "index.json"))
    return EXIT_OK


def load_bundles(path: str) -> dict[str, ModelBundle]:
    """Load a single ``.bundle`` file or a bundle directory written by ``train``."""
    if os.path.isfile(path):
        b = ModelBundle.load(path)
        return {b.class_tag or "": b}
    index_path = os.path.join(path, "index.json")
    if not os.path.isfile(index_path):
        raise UsageError(f"no bundle file or bundle directory at {path}")
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    out = {}
    for entry in index["bundles"].values():
        b = ModelBundle.load(os.path.join(path, entry["file"]))
        out[b.class_tag or ""] = b
    return out


def _generate(bundles: dict[str, ModelBundle], n: int, seed: int, cfg: RunConfig,
              train_counts: dict[str, int] | None) -> synth.SyntheticDataset:
    if list(bundles) == [""]:
        return synth.generate(bundles[""], n, seed)
    if train_counts is None:
        train_counts = {tag: 1 for tag in bundles}
    props = cfg.class_proportions({t: train_counts.get(t, 0) for t in bundles})
    unknown = sorted(set(props) - set(bundles))
    if unknown:
        raise UsageError(f"class proportions name classes without bundles: {unknown}")
    return synth.balance(bundles, synth.target_counts(props, n), seed)


def _train_counts(run_dir: str, cfg: RunConfig, schema: FeatureSchema) -> tuple[dict[str, int] | None, int | None]:
    try:
        prep = Prepared(run_dir, cfg)
    except (UsageError, DataError):
        return None, None
    train = prep.frames["train"]
    counts = train[schema.label].astype(str).value_counts().to_dict() if schema.label else None
    return counts, len(train)


def cmd_sample(args) -> int:
    cfg = _run_config(args)
    run_dir = _out(args, cfg)
    bundles = load_bundles(args.bundle or os.path.join(run_dir, "bundles"))
    schema = next(iter(bundles.values())).schema
    counts, n_train = _train_counts(run_dir, cfg, schema)
    n = args.n if args.n is not None else (cfg.sampler.n or n_train)
    if n is None:
        raise UsageError("--n is required when no prepared train split is available")
    if n < 0:
        raise UsageError("--n must be non-negative")
    seed = _seed(args, cfg, cfg.run.seed)
    ds = _generate(bundles, n, seed, cfg, counts)
    synth.write_synthetic(ds, args.synthetic or os.path.join(run_dir, "synthetic"), schema)
    log.info("wrote %d synthetic rows (consistency mse %.4g)", len(ds), ds.consistency_mse)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    run_dir = _out(args, cfg)
    prep = Prepared(run_dir, cfg)
    if args.bundle:
        bundles = load_bundles(args.bundle)
        n = args.n if args.n is not None else (cfg.sampler.n or len(prep.frames["train"]))
        counts = prep.frames["train"][prep.schema.label].astype(str).value_counts().to_dict() \
            if prep.schema.label else None
        ds = _generate(bundles, n, _seed(args, cfg, cfg.run.seed), cfg, counts)
    else:
        path = args.synthetic or os.path.join(run_dir, "synthetic")
        if not os.path.isdir(path):
            raise UsageError(f"no synthetic export at {path}; run `mmsynth sample` or pass --bundle")
        rows, images = synth.read_synthetic(path, prep.schema)
        if prep.schema.label is None or prep.schema.label not in rows.columns:
            raise DataError(f"{path}: synthetic rows carry no {prep.schema.label!r} column")
        tags = rows[prep.schema.label].astype(str).to_numpy()
        features = rows[prep.schema.feature_columns]
        ds = synth.SyntheticDataset(features, images, prep.preprocessor.transform(features), tags, 0, [])
    report = evaluate_dataset(ds, prep.preprocessor, prep.frames["train"], prep.frames["test"], cfg.evaluation())
    with staged_dir(os.path.join(run_dir, "report")) as tmp:
        with open(os.path.join(tmp, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        with open(os.path.join(tmp, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(tmp, "radar.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.radar_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", ""))
        p.add_argument("--config", help="INI file, or the preset name 'desk' / 'full' (default: desk)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="run directory (default: [run] out_dir)")
        if name in ("sample", "evaluate"):
            p.add_argument("--bundle", help="bundle file or bundle directory (default: <out>/bundles)")
            p.add_argument("--n", type=int, help="number of synthetic rows")
            p.add_argument("--synthetic", help="synthetic export directory (default: <out>/synthetic)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DataError, LeakageError, BundleError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (PipelineError, TrainingDiverged, SamplingDiverged) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
