import dataclasses
import json
import os

import numpy as np
import pandas as pd
import pytest
import torch

from mmsynth import dataio, edm
from mmsynth.synth import (BundleError, ModelBundle, PipelineConfig, PipelineError, balance, generate,
                           read_synthetic, target_counts, train_per_class, train_pipeline, write_synthetic)
from mmsynth.vae_image import ImageVAEConfig
from mmsynth.vae_tabular import TabularVAEConfig


def tiny_config(**kw):
    base = PipelineConfig(
        tabular=TabularVAEConfig(n_layers=1, n_heads=2, token_dim=8, latent_dim=4, decoder_hidden=16,
                                 epochs=3, batch_size=128, lr=1e-3),
        image=ImageVAEConfig(blocks=(4, 8), latent_dim=4, epochs=3, batch_size=128, lr=1e-3),
        diffusion=edm.DiffusionConfig(hidden=(16,), emb_dim=8, steps=20, batch_size=128, lr=1e-3),
        sampler=edm.SamplerConfig(n_steps=8),
        projector="pca",
    )
    return dataclasses.replace(base, **kw)


@pytest.fixture(scope="module")
def bundles(toy, toy_pre):
    return train_per_class(toy["train"], toy["val"], toy["schema"], tiny_config(), seed=0, preprocessor=toy_pre)


def test_per_class_gives_one_bundle_per_label(bundles, toy):
    assert sorted(bundles) == sorted(toy["train"]["label"].unique())
    for tag, b in bundles.items():
        assert b.class_tag == tag and b.latent_dim == 8
        b.check()
        assert len(b.logs["diffusion"]) == 20


def test_training_is_deterministic(toy, toy_pre):
    part = toy["train"].iloc[:300]
    a = train_pipeline(part, None, toy["schema"], tiny_config(), seed=5, preprocessor=toy_pre)
    b = train_pipeline(part, None, toy["schema"], tiny_config(), seed=5, preprocessor=toy_pre)
    assert a.checksum() == b.checksum()


def test_stage_failure_names_the_stage(toy, toy_pre):
    cfg = tiny_config(tabular=dataclasses.replace(tiny_config().tabular, lr=1e30))
    with pytest.raises(PipelineError) as info:
        train_pipeline(toy["train"].iloc[:200], None, toy["schema"], cfg, preprocessor=toy_pre)
    assert info.value.stage == "tabular_vae"


def test_preprocessor_must_come_from_train(toy, toy_pre):
    pre = dataclasses.replace(toy_pre, fit_split="val")
    with pytest.raises(PipelineError, match="preprocessor"):
        train_pipeline(toy["train"], None, toy["schema"], tiny_config(), preprocessor=pre)


def test_save_load_round_trip(bundles, tmp_path):
    b = bundles["attack"]
    digest = b.save(tmp_path / "a.bundle")
    assert digest == b.checksum()
    back = ModelBundle.load(tmp_path / "a.bundle")
    assert back.checksum() == digest
    x, y = generate(b, 20, seed=3), generate(back, 20, seed=3)
    pd.testing.assert_frame_equal(x.rows, y.rows)
    assert np.array_equal(x.images, y.images)


def test_load_rejects_bad_files(bundles, tmp_path):
    junk = tmp_path / "junk.bundle"
    junk.write_bytes(b"not a zip")
    with pytest.raises(BundleError, match="cannot open"):
        ModelBundle.load(junk)
    b = dataclasses.replace(bundles["attack"], version="other/9")
    b.save(tmp_path / "v.bundle")
    with pytest.raises(BundleError, match="version"):
        ModelBundle.load(tmp_path / "v.bundle")


def test_check_detects_dimension_mismatch(bundles):
    b = bundles["attack"]
    w = dataclasses.replace(b.whitening, segments=((0, 5), (5, 8)))
    with pytest.raises(BundleError, match="segments"):
        dataclasses.replace(b, whitening=w).check()


def test_generate_empty(bundles):
    ds = generate(bundles["benign"], 0)
    assert len(ds) == 0 and ds.images.shape == (0, 10, 10)
    assert list(ds.rows.columns) == bundles["benign"].schema.feature_columns


def test_generate_schema_closure(bundles, toy):
    ds = generate(bundles["benign"], 10_000, seed=1)
    schema = toy["schema"]
    for name, kind in schema.columns:
        if name == schema.label:
            continue
        col = ds.rows[name]
        if kind == "numeric":
            assert np.all(np.isfinite(col.to_numpy(float)))
        else:
            assert set(col) <= set(schema.vocab[name])
    assert ds.images.shape == (10_000, 10, 10) and ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.all(ds.class_tag == "benign") and np.isfinite(ds.consistency_mse)


def test_generate_seeded(bundles):
    a, b, c = (generate(bundles["attack"], 50, seed=s) for s in (2, 2, 3))
    pd.testing.assert_frame_equal(a.rows, b.rows)
    assert np.array_equal(a.images, b.images) and not np.array_equal(a.images, c.images)
    with pytest.raises(ValueError):
        generate(bundles["attack"], -1)


def test_target_counts():
    assert target_counts({"attack": 0.5, "benign": 0.5}, 1000) == {"attack": 500, "benign": 500}
    assert target_counts({"attack": 400, "benign": 1600}, 1000) == {"attack": 200, "benign": 800}
    assert target_counts({"a": 1, "b": 1, "c": 1}, 10) == {"a": 4, "b": 3, "c": 3}
    assert sum(target_counts({"a": 0.3, "b": 0.3, "c": 0.4}, 7).values()) == 7
    with pytest.raises(ValueError):
        target_counts({"a": -1, "b": 2}, 5)


def test_balance_histogram(bundles):
    counts = target_counts({"attack": 1, "benign": 1}, 60)
    ds = balance(bundles, counts, seed=0)
    tags, n = np.unique(ds.class_tag.astype(str), return_counts=True)
    assert dict(zip(tags, n.tolist())) == {"attack": 30, "benign": 30}
    with pytest.raises(KeyError, match="dos"):
        balance(bundles, {"dos": 3})


def test_export_round_trip(bundles, toy, toy_pre, tmp_path):
    ds = balance(bundles, {"attack": 5, "benign": 7}, seed=1)
    out = tmp_path / "syn"
    write_synthetic(ds, out, toy["schema"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n"] == 12 and manifest["class_counts"] == {"attack": 5, "benign": 7}
    assert len(os.listdir(out / "images")) == 12
    rows, images = read_synthetic(out, toy["schema"])
    assert len(rows) == 12 and list(rows["label"]) == list(ds.class_tag)
    # PGM export quantizes to 8 bits
    assert np.max(np.abs(images - ds.images)) <= 0.5 / 255 + 1e-12
    num = toy_pre.numeric_columns
    assert np.array_equal(rows[num].to_numpy(float), ds.rows[num].to_numpy(float))


def test_export_schema_mismatch(bundles, toy, tmp_path):
    write_synthetic(generate(bundles["attack"], 3), tmp_path / "s", toy["schema"])
    other = dataio.FeatureSchema([("x", "numeric")], {}, None)
    with pytest.raises(dataio.DataError, match="do not match"):
        read_synthetic(tmp_path / "s", other)


def test_config_dict_round_trip():
    cfg = tiny_config()
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        PipelineConfig(projector="umap")


@pytest.mark.slow
def test_posterior_health_on_desk_run(desk_run):
    """Aggregate posterior spread per latent dimension stays in [0.1, 10] for both VAEs."""
    from mmsynth.cli import Prepared, load_bundles
    from mmsynth.config import load_config
    from mmsynth import deepinsight
    from mmsynth.vae_tabular import reparameterize

    prep = Prepared(str(desk_run["dir"]), load_config(desk_run["config"]))
    gen = torch.Generator().manual_seed(0)
    for tag, b in load_bundles(str(desk_run["dir"] / "bundles")).items():
        train = prep.frames["train"]
        x = b.preprocessor.transform(train[train["label"] == tag])
        with torch.no_grad():
            z_tab = reparameterize(b.tabular.encode(x), gen).numpy()
            z_img = reparameterize(b.image.encode(deepinsight.render_batch(b.pixel_map, x)), gen).numpy()
        for name, z in (("tabular", z_tab), ("image", z_img)):
            std = z.std(axis=0)
            assert np.all((std >= 0.1) & (std <= 10)), f"{tag} {name}: {np.round(std, 3)}"
