"""Stagewise training, self-describing model bundles and paired generation."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
import zipfile
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np
import pandas as pd
import torch

from . import dataio, deepinsight, edm, latentspace
from .dataio import FeatureSchema, Preprocessor
from .deepinsight import PixelMap
from .vae_image import ImageVAE, ImageVAEConfig, build_image_vae, fit_image_vae
from .vae_tabular import TabularVAE, TabularVAEConfig, build_tabular_vae, fit_tabular_vae

log = logging.getLogger(__name__)

BUNDLE_VERSION = "mmsynth-bundle/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class BundleError(ValueError):
    pass


@dataclass
class PipelineConfig:
    tabular: TabularVAEConfig = field(default_factory=TabularVAEConfig)
    image: ImageVAEConfig = field(default_factory=ImageVAEConfig)
    diffusion: edm.DiffusionConfig = field(default_factory=edm.DiffusionConfig)
    schedule: edm.NoiseSchedule = field(default_factory=edm.NoiseSchedule)
    sampler: edm.SamplerConfig = field(default_factory=edm.SamplerConfig)
    k: int = 3
    grid: tuple[int, int] = (10, 10)
    projector: str = "tsne"
    unknown: str = "reject"
    quantile_grid: int = 1000
    categorical_decoding: str = "argmax"

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.categorical_decoding not in ("argmax", "sample"):
            raise ValueError("categorical_decoding must be 'argmax' or 'sample'")
        if self.projector not in ("tsne", "pca"):
            raise ValueError("projector must be 'tsne' or 'pca'")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        return cls(
            tabular=TabularVAEConfig(**d["tabular"]),
            image=ImageVAEConfig(**d["image"]),
            diffusion=edm.DiffusionConfig(**d["diffusion"]),
            schedule=edm.NoiseSchedule(**d["schedule"]),
            sampler=edm.SamplerConfig(**d["sampler"]),
            **{k: d[k] for k in ("k", "grid", "projector", "unknown", "quantile_grid", "categorical_decoding")},
        )


def stage_seeds(seed: int) -> dict[str, int]:
    return {"pixel_map": seed, "tabular": seed + 11, "image": seed + 23, "latents": seed + 37, "diffusion": seed + 41}


@dataclass
class ModelBundle:
    schema: FeatureSchema
    preprocessor: Preprocessor
    pixel_map: PixelMap
    tabular: TabularVAE
    image: ImageVAE
    whitening: latentspace.WhiteningStats
    denoiser: edm.Denoiser
    config: PipelineConfig
    seed: int
    class_tag: str | None = None
    version: str = BUNDLE_VERSION
    logs: dict = field(default_factory=dict, repr=False)

    @property
    def latent_dim(self) -> int:
        return self.whitening.dim

    def check(self) -> None:
        (t0, t1), (i0, i1) = self.whitening.segments
        problems = []
        if self.version != BUNDLE_VERSION:
            problems.append(f"unrecognised version {self.version!r}")
        if t1 - t0 != self.tabular.latent_dim or i1 - i0 != self.image.latent_dim:
            problems.append("latent segments disagree with VAE latent sizes")
        if self.denoiser.dim != self.latent_dim:
            problems.append("denoiser width disagrees with joint latent size")
        if self.pixel_map.n_features != self.preprocessor.n_features:
            problems.append("pixel map feature count disagrees with preprocessor")
        if self.tabular.n_columns != self.preprocessor.n_features:
            problems.append("tabular VAE width disagrees with preprocessor")
        if tuple(self.image.cfg.grid) != (self.pixel_map.grid_h, self.pixel_map.grid_w):
            problems.append("image VAE grid disagrees with pixel map")
        if problems:
            raise BundleError("; ".join(problems))

    def manifest(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "class_tag": self.class_tag,
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "preprocessor": self.preprocessor.to_dict(),
            "pixel_map": self.pixel_map.to_dict(),
            "whitening": self.whitening.to_dict(),
            "tabular_shape": {"n_numeric": self.tabular.n_numeric, "cardinalities": self.tabular.cardinalities},
            "stage_seeds": stage_seeds(self.seed),
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            _zip_write(zf, "manifest.json", json.dumps(self.manifest(), indent=1, sort_keys=True).encode())
            for prefix, module in (("tabular", self.tabular), ("image", self.image), ("denoiser", self.denoiser)):
                for name, tensor in module.state_dict().items():
                    arr = io.BytesIO()
                    np.save(arr, tensor.detach().cpu().numpy(), allow_pickle=False)
                    _zip_write(zf, f"{prefix}/{name}.npy", arr.getvalue())
        return buf.getvalue()

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | os.PathLike) -> str:
        data = self.to_bytes()
        _atomic_write_bytes(path, data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelBundle":
        try:
            zf = zipfile.ZipFile(path)
        except (OSError, zipfile.BadZipFile) as exc:
            raise BundleError(f"cannot open bundle {path}: {exc}") from exc
        with zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("version") != BUNDLE_VERSION:
                raise BundleError(f"unrecognised bundle version {manifest.get('version')!r}")
            config = PipelineConfig.from_dict(manifest["config"])
            shape = manifest["tabular_shape"]
            tab = build_tabular_vae(shape["n_numeric"], shape["cardinalities"], config.tabular, 0)
            img = build_image_vae(config.image, 0)
            whitening = latentspace.WhiteningStats.from_dict(manifest["whitening"])
            den = edm.build_denoiser(whitening.dim, config.diffusion, config.schedule.sigma_data, 0)
            for prefix, module in (("tabular", tab), ("image", img), ("denoiser", den)):
                state = {}
                for name in module.state_dict():
                    state[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(f"{prefix}/{name}.npy"))))
                module.load_state_dict(state)
                module.eval()
        bundle = cls(
            schema=FeatureSchema.from_dict(manifest["schema"]),
            preprocessor=Preprocessor.from_dict(manifest["preprocessor"]),
            pixel_map=PixelMap.from_dict(manifest["pixel_map"]),
            tabular=tab, image=img, whitening=whitening, denoiser=den, config=config,
            seed=manifest["seed"], class_tag=manifest["class_tag"], version=manifest["version"],
        )
        bundle.check()
        return bundle


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def train_pipeline(train: pd.DataFrame, val: pd.DataFrame | None, schema: FeatureSchema,
                   config: PipelineConfig | None = None, seed: int = 0,
                   preprocessor: Preprocessor | None = None, class_tag: str | None = None) -> ModelBundle:
    """Fit every stage in order and return a sealed bundle.

    A preprocessor fitted on the full training split may be passed in so that
    per-class bundles share one encoding; otherwise one is fitted on ``train``.
    """
    config = config or PipelineConfig()
    seeds = stage_seeds(seed)

    def stage(name, fn):
        log.info("stage %s", name)
        try:
            return fn()
        except Exception as exc:
            raise PipelineError(name, exc) from exc

    if preprocessor is None:
        preprocessor = stage("preprocessor", lambda: dataio.fit_preprocessor(
            train, schema, "train", unknown=config.unknown, max_grid=config.quantile_grid))
    elif preprocessor.fit_split != "train":
        raise PipelineError("preprocessor", dataio.LeakageError("preprocessor was not fitted on train"))
    x_train = stage("encode", lambda: preprocessor.transform(train))
    x_val = stage("encode", lambda: preprocessor.transform(val)) if val is not None and len(val) else None

    pm = stage("pixel_map", lambda: deepinsight.fit_pixel_map(
        x_train, config.grid, seeds["pixel_map"], config.projector, "train"))
    img_train = stage("render", lambda: deepinsight.render_batch(pm, x_train))
    img_val = deepinsight.render_batch(pm, x_val) if x_val is not None else None

    n_num = len(preprocessor.numeric_columns)
    tab, tab_log = stage("tabular_vae", lambda: fit_tabular_vae(
        x_train, x_val, n_num, preprocessor.cardinalities, config.tabular, seeds["tabular"]))
    img_cfg = replace(config.image, grid=config.grid)
    img, img_log = stage("image_vae", lambda: fit_image_vae(img_train, img_val, img_cfg, seeds["image"]))
    block = stage("latents", lambda: latentspace.build_latents(tab, img, x_train, img_train, config.k, seeds["latents"]))
    den, den_log = stage("diffusion", lambda: edm.fit_diffusion(block.z, config.schedule, config.diffusion,
                                                                seeds["diffusion"]))
    bundle = ModelBundle(
        schema=schema, preprocessor=preprocessor, pixel_map=pm, tabular=tab, image=img,
        whitening=block.stats, denoiser=den, config=replace(config, image=img_cfg), seed=seed,
        class_tag=class_tag, logs={"tabular": tab_log, "image": img_log, "diffusion": den_log},
    )
    bundle.check()
    return bundle


def train_per_class(train: pd.DataFrame, val: pd.DataFrame | None, schema: FeatureSchema,
                    config: PipelineConfig | None = None, seed: int = 0,
                    preprocessor: Preprocessor | None = None) -> dict[str, ModelBundle]:
    """One pipeline per label value, sharing a preprocessor fitted on all of ``train``."""
    config = config or PipelineConfig()
    if schema.label is None:
        raise ValueError("per-class training needs a label column")
    if preprocessor is None:
        preprocessor = dataio.fit_preprocessor(train, schema, "train", unknown=config.unknown,
                                               max_grid=config.quantile_grid)
    bundles = {}
    for i, tag in enumerate(sorted(train[schema.label].astype(str).unique())):
        part = train[train[schema.label].astype(str) == tag].reset_index(drop=True)
        vpart = None
        if val is not None:
            vpart = val[val[schema.label].astype(str) == tag].reset_index(drop=True)
        log.info("training class %r on %d rows", tag, len(part))
        bundles[tag] = train_pipeline(part, vpart, schema, config, seed + 1000 * i, preprocessor, class_tag=tag)
    return bundles


@dataclass
class SyntheticDataset:
    rows: pd.DataFrame
    images: np.ndarray  # (n, grid_h, grid_w) in [0, 1]
    encoded: np.ndarray  # rows in preprocessed space
    class_tag: np.ndarray | None
    seed: int
    bundle_ids: list[str]
    consistency_mse: float = float("nan")

    def __len__(self) -> int:
        return len(self.rows)


@torch.no_grad()
def generate(bundle: ModelBundle, n: int, seed: int = 0, sample_categoricals: bool | None = None) -> SyntheticDataset:
    """Sample joint latents, unwhiten, and decode paired rows and images."""
    if n < 0:
        raise ValueError("n must be non-negative")
    bundle_id = bundle.checksum()[:16]
    pre, pm = bundle.preprocessor, bundle.pixel_map
    tag = None if bundle.class_tag is None else np.full(n, bundle.class_tag, dtype=object)
    if n == 0:
        rows = pd.DataFrame({c: pd.Series(dtype=float if c in pre.numeric_columns else object)
                             for c in pre.schema.feature_columns})
        return SyntheticDataset(rows, np.zeros((0, pm.grid_h, pm.grid_w)), np.zeros((0, pre.n_features)),
                                tag, seed, [bundle_id])

    sampler = replace(bundle.config.sampler, seed=seed)
    z_std = edm.sample(bundle.denoiser, n, bundle.latent_dim, bundle.config.schedule, sampler)
    z_raw = latentspace.unwhiten(bundle.whitening, z_std)
    z_tab, z_img = latentspace.split_segments(bundle.whitening, z_raw)

    num, logits = bundle.tabular.decode(torch.as_tensor(z_tab, dtype=torch.float32))
    if sample_categoricals is None:
        sample_categoricals = bundle.config.categorical_decoding == "sample"
    gen = torch.Generator().manual_seed(seed + 1)
    codes = []
    for lg in logits:
        if sample_categoricals:
            codes.append(torch.multinomial(torch.softmax(lg.double(), dim=1), 1, generator=gen)[:, 0])
        else:
            codes.append(lg.argmax(dim=1))
    cat = torch.stack(codes, dim=1).double().numpy() if codes else np.zeros((n, 0))
    encoded = np.concatenate([num.double().numpy(), cat], axis=1)
    # decoded numerics are clamped to the training quantile range by the inverse map
    rows = pre.inverse_transform(encoded)
    encoded = pre.transform(rows)

    images = bundle.image.decode(torch.as_tensor(z_img, dtype=torch.float32)).double().numpy()
    rerendered = deepinsight.render_batch(pm, encoded)
    consistency = float(np.mean((images - rerendered) ** 2))
    return SyntheticDataset(rows, images, encoded, tag, seed, [bundle_id], consistency)


def target_counts(proportions: Mapping[str, float], total: int) -> dict[str, int]:
    """Largest-remainder allocation of ``total`` samples to classes."""
    keys = sorted(proportions)
    weights = np.array([float(proportions[k]) for k in keys])
    if total < 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("need non-negative proportions with positive sum and total >= 0")
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    order = sorted(range(len(keys)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return {k: int(c) for k, c in zip(keys, counts)}


def balance(bundles: Mapping[str, ModelBundle], counts: Mapping[str, int], seed: int = 0) -> SyntheticDataset:
    """Generate ``counts[c]`` samples from each class bundle and concatenate them."""
    missing = [c for c in counts if c not in bundles]
    if missing:
        raise KeyError(f"no bundle for classes {missing}")
    parts = [generate(bundles[c], int(counts[c]), seed + 7919 * i) for i, c in enumerate(sorted(counts))]
    return concat(parts, seed)


def concat(parts: list[SyntheticDataset], seed: int) -> SyntheticDataset:
    rows = pd.concat([p.rows for p in parts], ignore_index=True)
    tags = [p.class_tag if p.class_tag is not None else np.full(len(p), None, dtype=object) for p in parts]
    total = sum(len(p) for p in parts)
    mse = [p.consistency_mse * len(p) for p in parts if len(p)]
    return SyntheticDataset(
        rows=rows,
        images=np.concatenate([p.images for p in parts]),
        encoded=np.concatenate([p.encoded for p in parts]),
        class_tag=np.concatenate(tags) if tags else None,
        seed=seed,
        bundle_ids=[b for p in parts for b in p.bundle_ids],
        consistency_mse=float(sum(mse) / total) if total else float("nan"),
    )


def write_synthetic(ds: SyntheticDataset, out_dir: str | os.PathLike, schema: FeatureSchema) -> None:
    """Write ``rows.csv``, ``images/NNNNNN.pgm`` and ``manifest.json`` atomically."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".tmp-synth-")
    try:
        frame = ds.rows.copy()
        if schema.label is not None and ds.class_tag is not None:
            frame[schema.label] = ds.class_tag
            frame = frame[[c for c in schema.names if c in frame.columns]]
        frame.to_csv(os.path.join(tmp, "rows.csv"), index=False, float_format="%.17g", lineterminator="\n")
        os.makedirs(os.path.join(tmp, "images"))
        for i, img in enumerate(ds.images):
            deepinsight.write_pgm(os.path.join(tmp, "images", f"{i:06d}.pgm"), img)
        tags, counts = (np.unique(ds.class_tag.astype(str), return_counts=True)
                        if ds.class_tag is not None and len(ds) else ([], []))
        manifest = {
            "format": "mmsynth.synthetic",
            "version": 1,
            "n": len(ds),
            "seed": ds.seed,
            "bundles": ds.bundle_ids,
            "rows": "rows.csv",
            "images": [f"images/{i:06d}.pgm" for i in range(len(ds))],
            "class_counts": {str(t): int(c) for t, c in zip(tags, counts)},
            "consistency_mse": None if not np.isfinite(ds.consistency_mse) else ds.consistency_mse,
        }
        dataio.save_json(manifest, os.path.join(tmp, "manifest.json"))
        if os.path.exists(out_dir):
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_synthetic(path: str | os.PathLike, schema: FeatureSchema) -> tuple[pd.DataFrame, np.ndarray]:
    """Load exported rows (validated against ``schema``) and their images."""
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "mmsynth.synthetic":
        raise dataio.DataError(f"{path}: not a synthetic-dataset export")
    expected = list(schema.names)
    head = pd.read_csv(os.path.join(path, manifest["rows"]), nrows=0).columns.tolist()
    if head != expected and head != schema.feature_columns:
        raise dataio.DataError(f"{path}: columns {head} do not match schema {expected}")
    sub = FeatureSchema([c for c in schema.columns if c[0] in head], schema.vocab,
                        schema.label if schema.label in head else None)
    rows, _ = dataio.load_csv(os.path.join(path, manifest["rows"]), schema=sub)
    images = np.stack([deepinsight.read_pgm(os.path.join(path, p)) for p in manifest["images"]]) \
        if manifest["images"] else np.zeros((0, 0, 0))
    return rows, images
