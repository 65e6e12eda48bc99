"""Metrics and the evaluation protocols (base-to-new, cross-dataset,
incremental and the local-vs-global ablation)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .classifier import PromptLearner
from .conditioners import Parameters
from .encoders import FrozenEncoders
from .numerics import Rng, mix_seed
from .synthdata import Dataset, complement, sample_kshot
from .trainer import SgdConfig, TrainHistory, train

CSV_HEADER = ("protocol", "method", "seed", "seen_acc", "unseen_acc", "hm")
_ENCODER_STREAM = 0xE5C0
_INIT_STREAM = 0x1417


@dataclass(frozen=True)
class ModelConfig:
    M: int = 4
    d: int = 16
    d_joint: int = 16
    gamma: float = 0.01
    aggregation: str = "sum"
    text_hidden: int | None = None
    meta_hidden: int | None = None
    prompt_std: float = 0.02
    class_sigma: float = 0.1


@dataclass(frozen=True)
class MetricRow:
    protocol: str
    method: str
    seed: int
    seen_acc: float | None
    unseen_acc: float | None = None
    hm: float | None = None

    def __post_init__(self):
        for v in (self.seen_acc, self.unseen_acc):
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {v} outside [0, 100]")

    @classmethod
    def build(cls, protocol, method, seed, seen, unseen=None):
        hm = harmonic_mean(seen, unseen) if seen is not None and unseen is not None else None
        return cls(protocol, method, seed, seen, unseen, hm)

    @property
    def key(self) -> tuple[str, str, int]:
        return self.protocol, self.method, self.seed

    def csv_fields(self) -> list[str]:
        def fmt(v):
            return "" if v is None else f"{v:.2f}"
        return [self.protocol, self.method, str(self.seed),
                fmt(self.seen_acc), fmt(self.unseen_acc), fmt(self.hm)]


def accuracy(predictions, truth) -> float:
    if len(predictions) != len(truth):
        raise ValueError("predictions and truth differ in length")
    if len(truth) == 0:
        raise ValueError("cannot score an empty prediction list")
    correct = sum(int(p == t) for p, t in zip(predictions, truth))
    return 100.0 * correct / len(truth)


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValueError("harmonic mean needs non-negative inputs")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricRow]:
    def num(s):
        return None if s == "" else float(s)
    reader = csv.DictReader(io.StringIO(text))
    return [MetricRow(r["protocol"], r["method"], int(r["seed"]), num(r["seen_acc"]),
                      num(r["unseen_acc"]), num(r["hm"])) for r in reader]


def rows_to_json(rows) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2, sort_keys=True) + "\n"


def merge_rows(existing, new) -> list[MetricRow]:
    """Rows keyed by (protocol, method, seed); newer rows replace older ones."""
    merged = {r.key: r for r in existing}
    merged.update({r.key: r for r in new})
    return [merged[k] for k in sorted(merged)]


# building and running a learner

def build_learner(method: str, dataset: Dataset, model: ModelConfig, seed: int) -> PromptLearner:
    enc = FrozenEncoders.build(
        mix_seed(seed, _ENCODER_STREAM), dataset.prototypes, model.M, model.d, dataset.d_img,
        model.d_joint, model.text_hidden, model.class_sigma, table_seed=_table_seed(dataset))
    params = Parameters.init(Rng(mix_seed(seed, _INIT_STREAM)), model.M, model.d, dataset.d_img,
                             model.meta_hidden, model.prompt_std)
    return PromptLearner(method, params, enc, model.gamma, model.aggregation)


def _table_seed(dataset: Dataset) -> int:
    return dataset.descriptor.seed if dataset.descriptor is not None else 0


def evaluate(learner: PromptLearner, dataset: Dataset, class_ids) -> float:
    class_ids = list(class_ids)
    allowed = set(class_ids)
    preds, truth = [], []
    for s in dataset.samples:
        y = learner.predict_label(s.patches, class_ids)
        if y not in allowed:
            raise AssertionError(f"prediction {y} escaped the label space {class_ids}")
        preds.append(y)
        truth.append(s.label)
    return accuracy(preds, truth)


def fit(method: str, dataset: Dataset, k_shots: int, cfg: SgdConfig, seed: int,
        model: ModelConfig = ModelConfig()):
    """Train on k shots of the base classes. Returns learner, train subset, history."""
    shots = sample_kshot(dataset, k_shots, seed)
    learner = build_learner(method, dataset, model, seed)
    _, hist = train(learner, shots, replace(cfg, seed=seed), dataset.base_ids)
    return learner, shots, hist


def _seen_unseen(learner, dataset, shots):
    held_out = complement(dataset, shots)
    seen = evaluate(learner, held_out.where(dataset.base_ids), dataset.base_ids)
    new = dataset.where(dataset.new_ids)
    unseen = evaluate(learner, new, dataset.new_ids) if len(new) else None
    return seen, unseen


def run_base_to_new(method: str, dataset: Dataset, k_shots: int, cfg: SgdConfig, seed: int,
                    model: ModelConfig = ModelConfig(), protocol: str = "base_to_new") -> MetricRow:
    if not dataset.base_ids or not dataset.new_ids:
        raise ValueError("base-to-new needs both base and new classes")
    learner, shots, _ = fit(method, dataset, k_shots, cfg, seed, model)
    seen, unseen = _seen_unseen(learner, dataset, shots)
    return MetricRow.build(protocol, method, seed, seen, unseen)


def run_one_shot(method, dataset, cfg, seed, model: ModelConfig = ModelConfig()) -> MetricRow:
    return run_base_to_new(method, dataset, 1, cfg, seed, model, protocol="one_shot")


def run_cross_dataset(method: str, source: Dataset, target: Dataset, cfg: SgdConfig, seed: int,
                      model: ModelConfig = ModelConfig(), k_shots: int = 16) -> MetricRow:
    """seen_acc is held-out source accuracy; unseen_acc is zero-shot target accuracy."""
    if source.d_img != target.d_img:
        raise ValueError(f"source d_img {source.d_img} != target d_img {target.d_img}")
    learner, shots, _ = fit(method, source, k_shots, cfg, seed, model)
    held_out = complement(source, shots)
    seen = evaluate(learner, held_out.where(source.base_ids), source.base_ids)
    learner.encoders = learner.encoders.with_classes(target.prototypes, _table_seed(target))
    target_ids = list(range(target.num_classes))
    unseen = evaluate(learner, target, target_ids)
    return MetricRow.build("cross_dataset", method, seed, seen, unseen)


def run_incremental(method: str, dataset: Dataset, k_shots: int, cfg: SgdConfig, seed: int,
                    model: ModelConfig = ModelConfig()) -> MetricRow:
    """Joint seen+unseen label space; the accuracy is stored in seen_acc."""
    learner, shots, _ = fit(method, dataset, k_shots, cfg, seed, model)
    held_out = complement(dataset, shots)
    joint = dataset.base_ids + dataset.new_ids
    acc = evaluate(learner, held_out, sorted(joint))
    return MetricRow.build("incremental", method, seed, acc)


def run_ablation_global_vs_local(dataset: Dataset, k_shots: int, cfg: SgdConfig, seed: int,
                                 model: ModelConfig = ModelConfig()) -> tuple[MetricRow, MetricRow]:
    return tuple(run_base_to_new(m, dataset, k_shots, cfg, seed, model, protocol="ablation")
                 for m in ("copl", "copl_global"))


def history_for(method, dataset, k_shots, cfg, seed, model=ModelConfig()) -> TrainHistory:
    return fit(method, dataset, k_shots, cfg, seed, model)[2]
