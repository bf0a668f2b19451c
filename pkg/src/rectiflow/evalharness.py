"""Downstream evaluation: does synthetic data help a real classifier?

A linear logistic probe over flattened normalized pixels is trained on
real, synthetic, or mixed sets at controlled per-class ratios, always
evaluated on the same held-out real test split. Reported metrics are
accuracy and ROC-AUC (Mann-Whitney rank statistic, ties get half credit),
aggregated over seeds.

All sample counts are the reference protocol's counts divided by 10; the
scale note is embedded in every report.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ContractError, DataError, UndefinedMetricError
from .flowmodel import pixels_to_unit
from .lesiondata import LABELS, Manifest, generation_prompt
from .rng import Rng, derive_seed
from .sampler import SampleSpec, sample_images
from .trainer import Adam, Checkpoint, cosine_lr

SCALE_NOTE = "counts = reference protocol / 10"

_TAG_PICK_REAL = 501
_TAG_PICK_SYN = 502
_TAG_CLS_SHUFFLE = 503
_TAG_POOL = 504


# ---------------------------------------------------------------------------
# metrics


def accuracy(scores, labels) -> float:
    """Fraction of labels matching the sign rule: predict 1 iff score > 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.size == 0:
        raise ContractError(f"scores and labels must be equal-length and non-empty, "
                            f"got {scores.shape} vs {labels.shape}")
    return float(((scores > 0).astype(int) == labels).mean())


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 * P(tie).

    Computed from midranks, which reproduces exact pairwise counting with
    half credit for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points from a threshold sweep over distinct scores.

    Monotone from (0, 0) to (1, 1); tied scores move together, so the
    trapezoidal area equals the Mann-Whitney statistic exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        s = scores[order[i]]
        while j < scores.size and scores[order[j]] == s:
            tp += int(labels[order[j]] == 1)
            fp += int(labels[order[j]] == 0)
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def trapezoid_area(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-2
    schedule: str = "cosine"
    seed: int = 1


@dataclass
class LabeledSet:
    """Flattened [-1, 1] image vectors with 0/1 labels and unique ids."""

    x: np.ndarray
    y: np.ndarray
    ids: list[str]

    def __post_init__(self):
        if len({*self.ids}) != len(self.ids):
            raise DataError("labeled set ids are not unique")

    @staticmethod
    def concat(parts: list["LabeledSet"]) -> "LabeledSet":
        return LabeledSet(
            x=np.concatenate([p.x for p in parts]),
            y=np.concatenate([p.y for p in parts]),
            ids=[i for p in parts for i in p.ids],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256("\n".join(sorted(self.ids)).encode("utf-8"))
        return h.hexdigest()[:16]


class ClassifierModel:
    """One linear layer producing one logit; label 1 iff logit > 0."""

    def __init__(self, d: int):
        self.w = nm.parameter(np.zeros((1, d)))
        self.b = nm.parameter(np.zeros(1))

    def scores(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.w.data.T + self.b.data).ravel()


def train_classifier(train_set: LabeledSet, config: ClassifierConfig) -> ClassifierModel:
    """Adam-optimized logistic regression, deterministic per seed."""
    x, y = train_set.x, train_set.y
    if len(np.unique(y)) < 2:
        raise DataError("training set must contain both classes")
    model = ClassifierModel(x.shape[1])
    params = [model.w, model.b]
    adam = Adam(params)
    n = x.shape[0]
    sign = (2.0 * y - 1.0)[:, None]  # {0,1} -> {-1,+1}
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        perm = Rng(derive_seed(derive_seed(config.seed, _TAG_CLS_SHUFFLE), epoch)).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = nm.Tensor(x[idx])
            logits = nm.add_bias(nm.matmul(xb, nm.transpose(model.w)), model.b)
            margins = nm.mul(logits, nm.Tensor(-sign[idx]))
            loss = nm.scale(nm.sum_all(nm.softplus(margins)), 1.0 / len(idx))
            grads = nm.grad(loss, params)
            if config.schedule == "cosine":
                lr = cosine_lr(config.learning_rate, step / total_steps)
            else:
                lr = config.learning_rate
            adam.step(grads, lr)
            step += 1
    return model


def evaluate(model: ClassifierModel, test_set: LabeledSet) -> tuple[float, float]:
    scores = model.scores(test_set.x)
    return accuracy(scores, test_set.y), roc_auc(scores, test_set.y)


# ---------------------------------------------------------------------------
# data assembly


def real_labeled_set(manifest: Manifest, split: str, resolution: int) -> LabeledSet:
    records = manifest.select(split=split, resolution=resolution)
    if not records:
        raise DataError(f"no {split} records at resolution {resolution}")
    x = np.stack([pixels_to_unit(manifest.load_image(r)) for r in records])
    y = np.array([1 if r.label == "malignant" else 0 for r in records])
    return LabeledSet(x, y, [r.id for r in records])


def synthetic_pool(ckpt: Checkpoint, per_class: int, gen_seed: int,
                   steps: int = 20) -> dict[str, LabeledSet]:
    """Generate a reusable pool of synthetic images per label.

    The pool is a pure function of (checkpoint, per_class, gen_seed); runs
    subsample it per evaluation seed.
    """
    pools = {}
    for label_idx, label in enumerate(LABELS):
        spec = SampleSpec(prompt=generation_prompt(label), steps=steps,
                          seed=derive_seed(gen_seed, _TAG_POOL + label_idx),
                          count=per_class)
        images, _ = sample_images(ckpt, spec)
        x = np.stack([pixels_to_unit(img) for img in images])
        y = np.full(per_class, 1 if label == "malignant" else 0)
        ids = [f"syn-{label}-{i:05d}" for i in range(per_class)]
        pools[label] = LabeledSet(x, y, ids)
    return pools


def _subsample(ls: LabeledSet, count: int, rng: Rng) -> LabeledSet:
    if count > ls.x.shape[0]:
        raise DataError(f"requested {count} samples but only {ls.x.shape[0]} available")
    idx = rng.permutation(ls.x.shape[0])[:count]
    return LabeledSet(ls.x[idx], ls.y[idx], [ls.ids[int(i)] for i in idx])


def _split_by_label(ls: LabeledSet) -> dict[int, LabeledSet]:
    out = {}
    for cls in (0, 1):
        mask = ls.y == cls
        out[cls] = LabeledSet(ls.x[mask], ls.y[mask],
                              [i for i, m in zip(ls.ids, mask) if m])
    return out


def assert_no_leakage(train_ids: list[str], test_ids: list[str]) -> None:
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise DataError(f"test-split leakage into training set: {sorted(overlap)[:5]}")


# ---------------------------------------------------------------------------
# experiment protocol


@dataclass(frozen=True)
class HarnessConfig:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    resolution: int = 16
    gen_seed: int = 9000
    gen_steps: int = 20
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    # scenario (i): synthetic-only; scenario (ii): real + synthetic mixture
    scenario_i_syn_per_class: int = 300
    scenario_ii_real_per_class: int = 125
    scenario_ii_syn_per_class: int = 250
    # ratio sweep
    real_counts: tuple[int, ...] = (250, 500)
    x_values: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.75)
    include_pure_synthetic: bool = True


@dataclass(frozen=True)
class RatioSpec:
    """Per-class composition: real_count real images plus floor(real_count * x)
    synthetic images; pure_synthetic means zero real and real_count synthetic."""

    real_count: int
    x: float = 0.0
    pure_synthetic: bool = False

    def synthetic_per_class(self) -> int:
        if self.pure_synthetic:
            return self.real_count
        return int(self.real_count * self.x)

    def real_per_class(self) -> int:
        return 0 if self.pure_synthetic else self.real_count

    def tag(self) -> str:
        return "0:1" if self.pure_synthetic else f"1:{self.x:g}"


@dataclass
class EvalReport:
    scenario: str
    ratio: RatioSpec | None
    seeds: list[int]
    accuracies: list[float]
    aucs: list[float]
    test_fingerprint: str
    train_fingerprints: list[str]
    scale_note: str = SCALE_NOTE

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def acc_sd(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def auc_sd(self) -> float:
        return float(np.std(self.aucs, ddof=1)) if len(self.aucs) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "ratio": None if self.ratio is None else {
                "real_count": self.ratio.real_count,
                "x": self.ratio.x,
                "pure_synthetic": self.ratio.pure_synthetic,
            },
            "scale_note": self.scale_note,
            "seeds": list(self.seeds),
            "accuracy": {"per_seed": self.accuracies, "mean": self.acc_mean,
                         "sd": self.acc_sd},
            "roc_auc": {"per_seed": self.aucs, "mean": self.auc_mean, "sd": self.auc_sd},
            "fingerprints": {"test": self.test_fingerprint,
                             "train_per_seed": self.train_fingerprints},
        }


def _run_cells(real_by_label: dict[int, LabeledSet], pool: dict[str, LabeledSet],
               test_set: LabeledSet, scenario: str, ratio: RatioSpec | None,
               real_per_class: int, syn_per_class: int, config: HarnessConfig,
               roc_sink=None) -> EvalReport:
    accs, aucs, fps = [], [], []
    label_of = {0: "benign", 1: "malignant"}
    for seed in config.seeds:
        parts = []
        for cls in (0, 1):
            if real_per_class:
                parts.append(_subsample(real_by_label[cls], real_per_class,
                                        Rng(derive_seed(seed, _TAG_PICK_REAL + cls))))
            if syn_per_class:
                parts.append(_subsample(pool[label_of[cls]], syn_per_class,
                                        Rng(derive_seed(seed, _TAG_PICK_SYN + cls))))
        train_set = LabeledSet.concat(parts)
        assert_no_leakage(train_set.ids, test_set.ids)
        cls_cfg = ClassifierConfig(
            epochs=config.classifier.epochs, batch_size=config.classifier.batch_size,
            learning_rate=config.classifier.learning_rate,
            schedule=config.classifier.schedule, seed=seed)
        model = train_classifier(train_set, cls_cfg)
        scores = model.scores(test_set.x)
        accs.append(accuracy(scores, test_set.y))
        aucs.append(roc_auc(scores, test_set.y))
        fps.append(train_set.fingerprint())
        if roc_sink is not None:
            roc_sink(scenario, ratio, seed, roc_curve(scores, test_set.y))
    return EvalReport(scenario=scenario, ratio=ratio, seeds=list(config.seeds),
                      accuracies=accs, aucs=aucs,
                      test_fingerprint=test_set.fingerprint(),
                      train_fingerprints=fps)


def run_scenarios(manifest: Manifest, ckpt: Checkpoint,
                  config: HarnessConfig, roc_sink=None) -> tuple[EvalReport, EvalReport]:
    """Scenario (i): synthetic-only training; (ii): real + synthetic mixture.

    Both evaluate on the full real test split.
    """
    test_set = real_labeled_set(manifest, "test", config.resolution)
    real_train = real_labeled_set(manifest, "train", config.resolution)
    real_by_label = _split_by_label(real_train)
    for cls in (0, 1):
        if real_by_label[cls].x.shape[0] < config.scenario_ii_real_per_class:
            raise DataError(
                f"insufficient real data: scenario (ii) needs "
                f"{config.scenario_ii_real_per_class} per class, have "
                f"{real_by_label[cls].x.shape[0]}")
    pool = synthetic_pool(ckpt, max(config.scenario_i_syn_per_class,
                                    config.scenario_ii_syn_per_class),
                          config.gen_seed, steps=config.gen_steps)
    rep_i = _run_cells(real_by_label, pool, test_set, "i", None, 0,
                       config.scenario_i_syn_per_class, config, roc_sink)
    rep_ii = _run_cells(real_by_label, pool, test_set, "ii", None,
                        config.scenario_ii_real_per_class,
                        config.scenario_ii_syn_per_class, config, roc_sink)
    return rep_i, rep_ii


def run_ratio_sweep(manifest: Manifest, ckpt: Checkpoint,
                    config: HarnessConfig, roc_sink=None) -> list[EvalReport]:
    """One report per (real_count, x) cell plus pure-synthetic rows."""
    test_set = real_labeled_set(manifest, "test", config.resolution)
    real_train = real_labeled_set(manifest, "train", config.resolution)
    real_by_label = _split_by_label(real_train)
    max_real = max(config.real_counts)
    for cls in (0, 1):
        have = real_by_label[cls].x.shape[0]
        if have < max_real:
            raise DataError(f"insufficient real data: sweep needs {max_real} per class, "
                            f"have {have}")
    specs = [RatioSpec(rc, x) for rc in config.real_counts for x in config.x_values]
    if config.include_pure_synthetic:
        specs += [RatioSpec(rc, pure_synthetic=True) for rc in config.real_counts]
    pool_size = max(s.synthetic_per_class() for s in specs)
    pool = synthetic_pool(ckpt, max(pool_size, 1), config.gen_seed, steps=config.gen_steps)
    reports = []
    for spec in specs:
        scenario = spec.tag()
        reports.append(_run_cells(real_by_label, pool, test_set, scenario, spec,
                                  spec.real_per_class(), spec.synthetic_per_class(),
                                  config, roc_sink))
    return reports


# ---------------------------------------------------------------------------
# report files


def write_reports(reports: list[EvalReport], out_dir: Path, name: str) -> dict[str, Path]:
    """JSON (full structure), CSV (one row per seed), and a text table."""
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    paths = {}

    json_path = out / f"{name}.json"
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"scale_note": SCALE_NOTE, "reports": [r.to_dict() for r in reports]},
                  f, indent=2)
        f.write("\n")
    paths["json"] = json_path

    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(f"# {SCALE_NOTE}\n")
        f.write("scenario,real_count,x,seed,accuracy,auc\n")
        for r in reports:
            real_count = "" if r.ratio is None else r.ratio.real_count
            x = "" if r.ratio is None or r.ratio.pure_synthetic else f"{r.ratio.x:g}"
            for seed, acc, auc in zip(r.seeds, r.accuracies, r.aucs):
                f.write(f"{r.scenario},{real_count},{x},{seed},{acc!r},{auc!r}\n")
    paths["csv"] = csv_path

    table_path = out / f"{name}.txt"
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(f"{name} ({SCALE_NOTE})\n")
        f.write(f"{'scenario':>10s} {'real':>6s} {'x':>6s} {'accuracy':>19s} "
                f"{'roc_auc':>19s}\n")
        for r in reports:
            real_count = "-" if r.ratio is None else str(r.ratio.real_count)
            x = "-" if r.ratio is None or r.ratio.pure_synthetic else f"{r.ratio.x:g}"
            f.write(f"{r.scenario:>10s} {real_count:>6s} {x:>6s} "
                    f"{r.acc_mean:9.4f} +- {r.acc_sd:6.4f} "
                    f"{r.auc_mean:9.4f} +- {r.auc_sd:6.4f}\n")
    paths["table"] = table_path
    return paths


def make_roc_sink(out_dir: Path):
    """Returns a callback writing one fpr,tpr CSV per trained classifier."""
    roc_dir = Path(out_dir) / "roc"
    roc_dir.mkdir(exist_ok=True, parents=True)

    def sink(scenario: str, ratio: RatioSpec | None, seed: int,
             points: list[tuple[float, float]]):
        tag = scenario.replace(":", "_").replace(".", "p")
        if ratio is not None and not ratio.pure_synthetic:
            tag = f"{tag}_r{ratio.real_count}"
        elif ratio is not None:
            tag = f"{tag}_n{ratio.real_count}"
        path = roc_dir / f"{tag}_seed{seed}.csv"
        with open(path, "w", encoding="utf-8") as f:
            f.write("fpr,tpr\n")
            for fpr, tpr in points:
                f.write(f"{fpr!r},{tpr!r}\n")

    return sink
