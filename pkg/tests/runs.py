"""Helpers that drive the command-line pipeline from tests."""
import configparser
import hashlib
import os
import time
from importlib import resources

from mmsynth.cli import main

TINY = {
    "deepinsight": {"projector": "pca"},
    "tabular_vae": {"n_layers": "1", "n_heads": "2", "token_dim": "8", "latent_dim": "4", "decoder_hidden": "16",
                    "epochs": "3", "batch_size": "256"},
    "image_vae": {"blocks": "4, 8", "latent_dim": "4", "epochs": "3", "batch_size": "256"},
    "diffusion": {"hidden": "16", "emb_dim": "8", "steps": "10", "batch_size": "256"},
    "sampler": {"n_steps": "5"},
    "eval": {"n_trees": "20"},
}


def write_config(path, data_path, out_dir, overrides=None, base="desk"):
    """Copy a shipped preset, point it at ``data_path``/``out_dir`` and apply overrides."""
    text = resources.files("mmsynth").joinpath("presets").joinpath(f"{base}.ini").read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    cp["data"]["path"] = str(data_path)
    cp["run"]["out_dir"] = str(out_dir)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            cp[section][key] = value
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def run_pipeline(config, steps=("prepare", "train", "sample", "evaluate")):
    """Run CLI subcommands in order; returns wall-clock seconds per step."""
    times = {}
    for step in steps:
        t0 = time.perf_counter()
        code = run(step, "--config", config)
        times[step] = time.perf_counter() - t0
        if code != 0:
            raise AssertionError(f"`mmsynth {step}` exited with {code}")
    return times


def tree_digest(root):
    """sha256 of every file under ``root`` keyed by relative path."""
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            p = os.path.join(base, name)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


ACCEPTANCE = []


def verdict(number, name, ok, detail=""):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line
