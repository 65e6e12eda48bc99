"""``copl`` command line: gen-data, train, eval, gradcheck, hm-check.

Exit codes: 0 success, 1 check failure, 2 config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint, evaluation
from .classifier import METHODS
from .errors import FileFormatError, NonFiniteLoss
from .evaluation import ModelConfig, MetricRow
from .gradcheck import TOLERANCE, run_suite
from .synthdata import (DatasetDescriptor, DescriptorError, attach_classes, generate,
                        load_feature_cache, sample_kshot, save_feature_cache)
from .trainer import SgdConfig, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
PROTOCOLS = ("base_to_new", "one_shot", "cross_dataset", "incremental", "ablation", "hm_check")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "copl"
    methods: list[str] | None = None
    # dataset
    num_classes: int = 8
    split_fraction: float = 0.5
    patches: int = 9
    d_img: int = 16
    foreground: int = 3
    clutter_pool_size: int = 32
    noise_sigma: float = 0.3
    salience: float = 1.0
    samples_per_class: int = 50
    seed: int = 0
    target_seed_offset: int = 1000
    k_shots: int = 16
    # optimiser
    base_lr: float = 0.002
    warmup_lr: float = 1e-5
    warmup_epochs: int = 1
    epochs: int = 10
    batch_size: int = 1
    momentum: float = 0.9
    weight_decay: float = 0.0
    # model
    M: int = 4
    d: int = 16
    d_joint: int = 16
    gamma: float = 0.01
    aggregation: str = "sum"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    # files
    data_path: str | None = None
    checkpoint_path: str = "copl.ckpt"
    history_path: str = "history.csv"
    results_path: str = "results.csv"
    results_json_path: str | None = None

    def __post_init__(self):
        for m in [self.method, *(self.methods or [])]:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError("aggregation must be 'sum' or 'mean'")
        if self.k_shots < 1:
            raise ConfigError("k_shots must be at least 1")
        try:
            self.descriptor()
            self.sgd(self.seed)
            self.model()
        except (DescriptorError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        unknown = sorted(set(data) - cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def descriptor(self, seed: int | None = None) -> DatasetDescriptor:
        names = set(DatasetDescriptor.field_names()) - {"clutter_seed"}
        kw = {k: getattr(self, k) for k in names}
        if seed is not None:
            kw["seed"] = seed
        return DatasetDescriptor(**kw)

    def sgd(self, seed: int) -> SgdConfig:
        return SgdConfig(self.base_lr, self.warmup_lr, self.warmup_epochs, self.epochs,
                         self.batch_size, seed, self.momentum, self.weight_decay)

    def model(self) -> ModelConfig:
        return ModelConfig(M=self.M, d=self.d, d_joint=self.d_joint, gamma=self.gamma,
                           aggregation=self.aggregation)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a flat JSON object")
    if len(overrides) % 2:
        raise ConfigError("overrides must come in --key value pairs")
    for flag, raw in zip(overrides[0::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        data[flag[2:].replace("-", "_")] = _parse_value(raw)
    try:
        return ExperimentConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_config_echo(cfg: ExperimentConfig, target: str) -> None:
    Path(target + ".config.json").write_text(cfg.to_json())


def load_dataset(cfg: ExperimentConfig, seed: int | None = None):
    reference = generate(cfg.descriptor(seed))
    if cfg.data_path and Path(cfg.data_path).exists() and seed in (None, cfg.seed):
        return attach_classes(load_feature_cache(cfg.data_path), reference)
    return reference


# commands

def cmd_gen_data(cfg: ExperimentConfig, out: str) -> int:
    ds = generate(cfg.descriptor())
    save_feature_cache(ds, out)
    _write_config_echo(cfg, out)
    d = ds.descriptor
    print(f"wrote {out}: K={d.num_classes} P={d.patches} d_img={d.d_img} samples={len(ds)} "
          f"base={ds.base_ids} new={ds.new_ids}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    ds = load_dataset(cfg)
    shots = sample_kshot(ds, cfg.k_shots, cfg.seed)
    learner = evaluation.build_learner(cfg.method, ds, cfg.model(), cfg.seed)
    blob, hist = train(learner, shots, cfg.sgd(cfg.seed), ds.base_ids)
    Path(cfg.checkpoint_path).write_bytes(blob)
    Path(cfg.history_path).write_text(hist.to_csv())
    _write_config_echo(cfg, cfg.checkpoint_path)
    _write_config_echo(cfg, cfg.history_path)
    print(f"trained {cfg.method} on {len(shots)} samples for {cfg.epochs} epochs; "
          f"final epoch loss {hist.epoch_loss[-1] if hist.epoch_loss else float('nan'):.4f}")
    return EXIT_OK


def _run_protocol(protocol: str, method: str, cfg: ExperimentConfig, seed: int,
                  ckpt: str | None) -> list[MetricRow]:
    ds = load_dataset(cfg, seed)
    sgd, model = cfg.sgd(seed), cfg.model()
    if protocol in ("base_to_new", "one_shot") and ckpt:
        k = 1 if protocol == "one_shot" else cfg.k_shots
        learner = evaluation.build_learner(method, ds, model, seed)
        learner.params = checkpoint.load(ckpt)
        shots = sample_kshot(ds, k, seed)
        seen, unseen = evaluation._seen_unseen(learner, ds, shots)
        return [MetricRow.build(protocol, method, seed, seen, unseen)]
    if protocol == "base_to_new":
        return [evaluation.run_base_to_new(method, ds, cfg.k_shots, sgd, seed, model)]
    if protocol == "one_shot":
        return [evaluation.run_one_shot(method, ds, sgd, seed, model)]
    if protocol == "incremental":
        return [evaluation.run_incremental(method, ds, cfg.k_shots, sgd, seed, model)]
    if protocol == "cross_dataset":
        target = generate(ds.descriptor.transfer_target(seed + cfg.target_seed_offset))
        return [evaluation.run_cross_dataset(method, ds, target, sgd, seed, model, cfg.k_shots)]
    if protocol == "ablation":
        return list(evaluation.run_ablation_global_vs_local(ds, cfg.k_shots, sgd, seed, model))
    raise ConfigError(f"unknown protocol {protocol!r}")


def cmd_eval(cfg: ExperimentConfig, protocol: str, ckpt: str | None = None, jobs: int = 1) -> int:
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; valid: {', '.join(PROTOCOLS)}")
    methods = ["copl"] if protocol == "ablation" else (cfg.methods or [cfg.method])
    tasks = [(protocol, m, cfg, s, ckpt) for m in methods for s in cfg.seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_run_task, tasks))
    else:
        batches = [_run_task(t) for t in tasks]
    rows = [r for batch in batches for r in batch]
    path = Path(cfg.results_path)
    existing = evaluation.rows_from_csv(path.read_text()) if path.exists() else []
    merged = evaluation.merge_rows(existing, rows)
    path.write_text(evaluation.rows_to_csv(merged))
    json_path = cfg.results_json_path
    if json_path:
        jp = Path(json_path)
        old = [MetricRow(**r) for r in json.loads(jp.read_text())] if jp.exists() else []
        jp.write_text(evaluation.rows_to_json(evaluation.merge_rows(old, rows)))
    _write_config_echo(cfg, cfg.results_path)
    sys.stdout.write(evaluation.rows_to_csv(rows))
    return EXIT_OK


def _run_task(task):
    return _run_protocol(*task)


def cmd_gradcheck(n_instances: int = 20) -> int:
    result = run_suite(n_instances)
    for group, (err, where) in sorted(result.worst_by_group().items()):
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{group:10s} max_rel_err={err:.3e} ({where}) {status}")
    path, err = result.worst
    if not result.passed:
        print(f"gradient check failed: worst {path} relative error {err:.3e} > {TOLERANCE:g}")
        return EXIT_CHECK
    print(f"all {len(result.reports)} checks passed (worst {path} {err:.3e})")
    return EXIT_OK


def cmd_hm_check(seen: float, unseen: float) -> int:
    print(f"{evaluation.harmonic_mean(seen, unseen):.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="copl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", help="write a CPFC1 feature cache")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    t = sub.add_parser("train", help="train one method, write checkpoint + history")
    t.add_argument("--config")
    e = sub.add_parser("eval", help="run an evaluation protocol over the configured seeds")
    e.add_argument("--config")
    e.add_argument("--protocol", required=True)
    e.add_argument("--checkpoint", help="evaluate this checkpoint instead of training")
    e.add_argument("--jobs", type=int, default=1)
    gc = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    gc.add_argument("--instances", type=int, default=20)
    h = sub.add_parser("hm-check", help="harmonic mean of two accuracies")
    h.add_argument("seen", type=float)
    h.add_argument("unseen", type=float)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.instances)
        if args.command == "hm-check":
            return cmd_hm_check(args.seen, args.unseen)
        if args.command == "eval" and args.protocol == "hm_check":
            try:
                seen, unseen = (float(v) for v in extra)
            except ValueError:
                raise ConfigError("hm_check needs two values: seen unseen") from None
            return cmd_hm_check(seen, unseen)
        cfg = load_config(args.config, extra)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_eval(cfg, args.protocol, args.checkpoint, args.jobs)
    except (ConfigError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
