"""Run configuration: an INI file with one section per pipeline module.

Every key has a documented default (see ``presets/full.ini``); unknown
sections or keys are rejected before any work starts.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources

from . import edm
from .evalkit import BoosterParams, EvalConfig
from .synth import PipelineConfig
from .vae_image import ImageVAEConfig
from .vae_tabular import TabularVAEConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = ""
    label: str = "label"
    per_class: bool = True
    categorical_threshold: int = 2
    unknown: str = "reject"
    quantile_grid: int = 1000


@dataclass
class SplitSection:
    seed: int = 0


@dataclass
class DeepInsightSection:
    grid_h: int = 10
    grid_w: int = 10
    projector: str = "tsne"


@dataclass
class LatentSection:
    k: int = 3


@dataclass
class SamplingSection:
    s_churn: float = 3.0
    s_noise: float = 1.2
    n_steps: int = 50
    heun: bool = True
    categorical_decoding: str = "argmax"
    # "train" keeps the training class mix, "balanced" is uniform, or "a:0.5,b:0.5"
    class_proportions: str = "train"
    n: int = 0  # 0 means "as many rows as the train split"


@dataclass
class EvalSection:
    k: int = 5
    seed: int = 0
    max_prdc: int = 5000
    n_trees: int = 300
    max_depth: int = 6
    learning_rate: float = 0.1


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    deepinsight: DeepInsightSection = field(default_factory=DeepInsightSection)
    tabular_vae: TabularVAEConfig = field(default_factory=TabularVAEConfig)
    image_vae: ImageVAEConfig = field(default_factory=ImageVAEConfig)
    latent: LatentSection = field(default_factory=LatentSection)
    diffusion: edm.DiffusionConfig = field(default_factory=edm.DiffusionConfig)
    schedule: edm.NoiseSchedule = field(default_factory=edm.NoiseSchedule)
    sampler: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def pipeline(self) -> PipelineConfig:
        grid = (self.deepinsight.grid_h, self.deepinsight.grid_w)
        return PipelineConfig(
            tabular=self.tabular_vae,
            image=dataclasses.replace(self.image_vae, grid=grid),
            diffusion=self.diffusion,
            schedule=self.schedule,
            sampler=edm.SamplerConfig(s_churn=self.sampler.s_churn, s_noise=self.sampler.s_noise,
                                      n_steps=self.sampler.n_steps, heun=self.sampler.heun),
            k=self.latent.k,
            grid=grid,
            projector=self.deepinsight.projector,
            unknown=self.data.unknown,
            quantile_grid=self.data.quantile_grid,
            categorical_decoding=self.sampler.categorical_decoding,
        )

    def evaluation(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(k=e.k, seed=e.seed, max_prdc=e.max_prdc,
                          booster=BoosterParams(e.n_trees, e.max_depth, e.learning_rate))

    def class_proportions(self, train_counts: dict[str, int]) -> dict[str, float]:
        mix = self.sampler.class_proportions.strip()
        if mix == "train":
            return {k: float(v) for k, v in train_counts.items()}
        if mix == "balanced":
            return {k: 1.0 for k in train_counts}
        out = {}
        for item in mix.split(","):
            name, _, value = item.partition(":")
            try:
                out[name.strip()] = float(value)
            except ValueError as exc:
                raise ConfigError(f"[sampler] class_proportions: bad entry {item!r}") from exc
        return out


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    base = RunConfig()
    sections = {f.name: getattr(base, f.name) for f in dataclasses.fields(RunConfig)}
    unknown = [s for s in parser.sections() if s not in sections]
    if unknown:
        raise ConfigError(f"{source}: unknown sections {unknown}")
    built = {}
    for name, default_obj in sections.items():
        defaults = {f.name: getattr(default_obj, f.name) for f in dataclasses.fields(default_obj)}
        values = dict(defaults)
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ConfigError(f"{source}: unknown key {key!r} in section [{name}]")
                values[key] = _convert(name, key, raw, defaults[key])
        try:
            built[name] = type(default_obj)(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: section [{name}]: {exc}") from exc
    cfg = RunConfig(**built)
    try:
        cfg.pipeline()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def preset(name: str) -> RunConfig:
    """Load a shipped preset: ``"desk"`` or ``"full"``."""
    text = resources.files("mmsynth").joinpath("presets").joinpath(f"{name}.ini").read_text(encoding="utf-8")
    return parse_config(text, source=f"preset:{name}")
