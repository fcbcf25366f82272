import numpy as np
import pytest
import torch

from mmsynth import dataio
from mmsynth.datasets import make_toy_frame
from runs import run_pipeline, write_config


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy():
    frame, schema = make_toy_frame(2000, seed=0)
    parts = dataio.split(len(frame), seed=0)
    return {
        "frame": frame,
        "schema": schema,
        "split": parts,
        "train": dataio.subset(frame, parts.train),
        "val": dataio.subset(frame, parts.val),
        "test": dataio.subset(frame, parts.test),
    }


@pytest.fixture(scope="session")
def toy_pre(toy):
    return dataio.fit_preprocessor(toy["train"], toy["schema"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_csv(tmp_path_factory):
    frame, _ = make_toy_frame(2000, seed=0)
    path = tmp_path_factory.mktemp("data") / "toy.csv"
    frame.to_csv(path, index=False)
    return path


def _desk_run(tmp_path_factory, toy_csv, name, steps):
    root = tmp_path_factory.mktemp(name)
    config = write_config(root / "run.ini", toy_csv, root / "run")
    times = run_pipeline(config, steps)
    return {"config": config, "dir": root / "run", "times": times}


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, toy_csv):
    """Full desk-preset CLI run on the toy table: prepare, train, sample, evaluate."""
    return _desk_run(tmp_path_factory, toy_csv, "desk_a", ("prepare", "train", "sample", "evaluate"))


@pytest.fixture(scope="session")
def desk_rerun(tmp_path_factory, toy_csv):
    """Second independent run with identical config and seeds."""
    return _desk_run(tmp_path_factory, toy_csv, "desk_b", ("prepare", "train", "sample"))


def pytest_terminal_summary(terminalreporter):
    from runs import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
