"""Generative-quality metrics: PRDC, detectability and ML efficacy."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

TABLE_COLUMNS = ["Detectability", "Precision", "Recall", "Density", "Coverage", "AUC (MLE)"]


def knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour, self excluded."""
    d = cdist(points, points)
    return np.partition(d, k, axis=1)[:, k]


def prdc(real: np.ndarray, fake: np.ndarray, k: int = 5) -> dict[str, float]:
    """Precision, recall, density and coverage with inclusive k-NN balls."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ValueError(f"dimension mismatch: real {real.shape}, fake {fake.shape}")
    if not 1 <= k < min(len(real), len(fake)):
        raise ValueError(f"k={k} must satisfy 1 <= k < min(|real|, |fake|) = {min(len(real), len(fake))}")
    r_real = knn_radii(real, k)
    r_fake = knn_radii(fake, k)
    d = cdist(real, fake)  # (n_real, n_fake)
    in_real_ball = d <= r_real[:, None]
    in_fake_ball = d <= r_fake[None, :]
    return {
        "precision": float(in_real_ball.any(axis=0).mean()),
        "recall": float(in_fake_ball.any(axis=1).mean()),
        "density": float(in_real_ball.sum() / (k * len(fake))),
        "coverage": float(in_real_ball.any(axis=1).mean()),
    }


def detectability_from_auc(auc: float) -> float:
    return 1.0 - 2.0 * abs(auc - 0.5)


def _subsample(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) == n:
        return x
    return x[np.sort(rng.choice(len(x), size=n, replace=False))]


def detection_auc(real: np.ndarray, fake: np.ndarray, seed: int = 0, c: float = 1.0, max_retries: int = 5) -> float:
    """ROC-AUC of a logistic-regression real/fake classifier on a 50/50 stratified holdout."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score
    from sklearn.model_selection import train_test_split

    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if len(real) < 20 or len(fake) < 20:
        raise ValueError("detectability needs at least 20 real and 20 synthetic samples")
    if real.shape[1] != fake.shape[1]:
        raise ValueError("dimension mismatch between real and synthetic features")
    rng = np.random.default_rng(seed)
    n = min(len(real), len(fake))
    real, fake = _subsample(real, n, rng), _subsample(fake, n, rng)
    x = np.concatenate([real, fake])
    y = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    for attempt in range(max_retries + 1):
        x_tr, x_ev, y_tr, y_ev = train_test_split(x, y, test_size=0.5, stratify=y, random_state=seed + attempt)
        if len(np.unique(y_ev)) == 2 and len(np.unique(y_tr)) == 2:
            break
    else:
        raise RuntimeError("could not obtain a two-class evaluation split")
    clf = LogisticRegression(C=c, max_iter=2000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        clf.fit(x_tr, y_tr)
    return float(roc_auc_score(y_ev, clf.decision_function(x_ev)))


def detectability(real_holdout: np.ndarray, fake: np.ndarray, seed: int = 0) -> float:
    """1 - 2|AUC - 0.5| of the real/fake classifier; 1 means indistinguishable."""
    return detectability_from_auc(detection_auc(real_holdout, fake, seed))


@dataclass
class BoosterParams:
    n_trees: int = 300
    max_depth: int = 6
    learning_rate: float = 0.1


def mle(syn_x: np.ndarray, syn_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray, seed: int = 0,
        params: BoosterParams | None = None) -> dict[str, float]:
    """Train a gradient-boosted classifier on synthetic data, score on real test data."""
    from sklearn.ensemble import HistGradientBoostingClassifier
    from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

    params = params or BoosterParams()
    syn_y = np.asarray(syn_y).astype(str)
    test_y = np.asarray(test_y).astype(str)
    present = np.unique(syn_y)
    if len(present) < 2:
        raise ValueError(f"synthetic training set has a single class {present.tolist()}")
    absent = sorted(set(np.unique(test_y)) - set(present))
    if absent:
        warnings.warn(f"classes {absent} absent from synthetic data; scoring on present classes only")
        keep = np.isin(test_y, present)
        test_x, test_y = test_x[keep], test_y[keep]
    clf = HistGradientBoostingClassifier(max_iter=params.n_trees, max_depth=params.max_depth,
                                         learning_rate=params.learning_rate, early_stopping=False,
                                         random_state=seed)
    clf.fit(syn_x, syn_y)
    proba = clf.predict_proba(test_x)
    pred = clf.classes_[proba.argmax(axis=1)]
    if len(clf.classes_) == 2:
        auc = roc_auc_score(test_y == clf.classes_[1], proba[:, 1])
    else:
        auc = roc_auc_score(test_y, proba, multi_class="ovr", labels=clf.classes_)
    return {
        "auc": float(auc),
        "f1": float(f1_score(test_y, pred, average="macro")),
        "accuracy": float(accuracy_score(test_y, pred)),
    }


@dataclass
class MetricReport:
    precision: float
    recall: float
    density: float
    coverage: float
    detectability: float
    mle: dict[str, float]
    k: int
    sizes: dict[str, int]
    seeds: dict[str, int]
    provenance: dict[str, str] = field(default_factory=dict)
    model: str = "mmsynth"

    def __post_init__(self):
        for name in ("precision", "recall", "coverage", "detectability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.density < 0:
            raise ValueError("density must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def table_row(self) -> list[float]:
        return [self.detectability, self.precision, self.recall, self.density, self.coverage, self.mle["auc"]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Model"] + TABLE_COLUMNS)
        w.writerow([self.model] + [repr(v) for v in self.table_row()])
        return buf.getvalue()

    def radar_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "metric", "value"])
        for name, v in zip(TABLE_COLUMNS[:5], self.table_row()[:5]):
            w.writerow([self.model, name, repr(v)])
        return buf.getvalue()


@dataclass
class EvalConfig:
    k: int = 5
    seed: int = 0
    max_prdc: int = 5000
    booster: BoosterParams = field(default_factory=BoosterParams)


def evaluate(syn_x: np.ndarray, syn_y: np.ndarray, train_x: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
             cfg: EvalConfig | None = None, test_split_name: str = "test") -> MetricReport:
    """One report row from metric-space features (one-hot preprocessed).

    PRDC compares synthetic rows with the real train split, detectability with
    the held-out test split, and MLE trains on synthetic and scores on test;
    real and synthetic sets are subsampled to matched sizes.
    """
    cfg = cfg or EvalConfig()
    if test_split_name != "test":
        raise ValueError("MLE must be scored on the untouched test split")
    rng = np.random.default_rng(cfg.seed)
    n_prdc = min(len(train_x), len(syn_x), cfg.max_prdc)
    real_p = _subsample(train_x, n_prdc, rng)
    fake_p = _subsample(syn_x, n_prdc, rng)
    pr = prdc(real_p, fake_p, cfg.k)
    det = detectability(test_x, syn_x, cfg.seed)
    eff = mle(syn_x, syn_y, test_x, test_y, cfg.seed, cfg.booster)
    return MetricReport(
        precision=pr["precision"], recall=pr["recall"], density=pr["density"], coverage=pr["coverage"],
        detectability=det, mle=eff, k=cfg.k,
        sizes={"prdc": n_prdc, "detectability": min(len(test_x), len(syn_x)), "synthetic": len(syn_x),
               "test": len(test_x)},
        seeds={"eval": cfg.seed},
        provenance={"prdc_real": "train", "detectability_real": test_split_name, "mle_test": test_split_name,
                    "feature_space": "quantile-gaussian numerics + one-hot categoricals"},
    )


def evaluate_dataset(ds, preprocessor, train_frame, test_frame, cfg: EvalConfig | None = None) -> MetricReport:
    """Evaluate a ``SyntheticDataset`` against real train/test frames."""
    from .dataio import labels_of, one_hot

    schema = preprocessor.schema
    if ds.class_tag is None:
        raise ValueError("synthetic dataset carries no class tags; MLE needs labels")
    syn_x = one_hot(preprocessor, preprocessor.transform(ds.rows))
    train_x = one_hot(preprocessor, preprocessor.transform(train_frame))
    test_x = one_hot(preprocessor, preprocessor.transform(test_frame))
    return evaluate(syn_x, np.asarray(ds.class_tag).astype(str), train_x, test_x, labels_of(test_frame, schema), cfg)
