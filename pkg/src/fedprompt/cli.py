"""Experiment runner: JSON config in, CSV/JSON artifacts out.

Subcommands:
  run        execute a federated training run and write its artifacts
  gradcheck  compare tape gradients against finite differences
  partition  write partition / label-histogram CSVs without training
  eval       re-evaluate a saved run directory

Exit status 0 means every requested artifact was written; config
problems exit 2 with a field-level message, runtime failures exit 1.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from .data import (
    SyntheticSpec,
    generate_synthetic,
    label_histograms,
    partition_dirichlet,
    partition_pathological,
)
from .errors import ConfigError, TrainingError
from .evaluation import comm_accounting, evaluate_clients, heldout_split
from .federation import TrainConfig, build_clients, run_training
from .model import ModelConfig, PromptParams, init_backbone
from .prototypes import PrototypeBank
from . import __version__

WORKERS_ENV = "FEDPROMPT_WORKERS"
_MISSING = object()


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, _MISSING)
    if value is _MISSING:
        raise ConfigError(f"missing required field {name!r}")
    if not isinstance(value, dict):
        raise ConfigError(f"field {name!r} must be an object")
    return value


def _field(section: dict, section_name: str, key: str, default=_MISSING):
    value = section.get(key, default)
    if value is _MISSING:
        raise ConfigError(f"missing required field {section_name}.{key!r}")
    return value


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    data: SyntheticSpec
    partition_mode: str
    classes_per_client: int
    dirichlet_beta: float
    model: ModelConfig
    train: TrainConfig
    num_clients: int
    heldout_fraction: float

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        data = _section(raw, "data")
        partition = _section(raw, "partition")
        model = raw.get("model", {})
        train = _section(raw, "train")

        spec = SyntheticSpec(
            classes=int(_field(data, "data", "classes")),
            train_per_class=int(_field(data, "data", "train_per_class")),
            test_per_class=int(_field(data, "data", "test_per_class")),
            image_size=int(data.get("image_size", 16)),
            separation=float(data.get("separation", 1.0)),
            noise=float(data.get("noise", 1.0)),
        )
        mode = _field(partition, "partition", "mode")
        if mode not in ("pathological", "dirichlet"):
            raise ConfigError(
                f"partition.mode must be 'pathological' or 'dirichlet', got {mode!r}")
        if mode == "pathological":
            k = int(_field(partition, "partition", "classes_per_client"))
            beta = float(partition.get("beta", 0.3))
        else:
            k = int(partition.get("classes_per_client", 0))
            beta = float(_field(partition, "partition", "beta"))

        model_cfg = ModelConfig(
            dim=int(model.get("dim", 32)),
            layers=int(model.get("layers", 8)),
            heads=int(model.get("heads", 2)),
            image_size=spec.image_size,
            patch_size=int(model.get("patch_size", 8)),
            mix_layers=tuple(model.get("mix_layers", (5, 6, 7))),
            tau=float(model.get("tau", 0.05)),
            refresh_mix=bool(model.get("refresh_mix", True)),
            detach_scores=bool(model.get("detach_scores", False)),
        )
        dp = train.get("dp_epsilon")
        train_cfg = TrainConfig(
            clients_per_round=int(_field(train, "train", "clients_per_round")),
            rounds=int(_field(train, "train", "rounds")),
            local_epochs=int(train.get("local_epochs", 2)),
            batch_size=int(train.get("batch_size", 16)),
            lr=float(train.get("lr", 0.1)),
            lr_decay=float(train.get("lr_decay", 0.99)),
            momentum=float(train.get("momentum", 0.9)),
            grad_clip=float(train.get("grad_clip", 10.0)),
            rho=float(train.get("rho", 0.9)),
            update_period=int(train.get("update_period", 1)),
            dp_epsilon=None if dp is None else float(dp),
            strategy=str(train.get("strategy", "mixed")),
            shared_prompts=int(train.get("shared_prompts", 1)),
            warmup_fraction=float(train.get("warmup_fraction", 1.0)),
            weighted_fedavg=bool(train.get("weighted_fedavg", False)),
            workers=int(train.get("workers", 1)),
        )
        heldout = float(raw.get("heldout_fraction", 0.0))
        if not 0.0 <= heldout < 1.0:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        return cls(
            seed=int(raw.get("seed", 0)),
            out_dir=str(raw.get("out_dir", "run")),
            data=spec,
            partition_mode=mode,
            classes_per_client=k,
            dirichlet_beta=beta,
            model=model_cfg,
            train=train_cfg,
            num_clients=int(_field(train, "train", "clients")),
            heldout_fraction=heldout,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "heldout_fraction": self.heldout_fraction,
            "data": asdict(self.data),
            "partition": {
                "mode": self.partition_mode,
                "classes_per_client": self.classes_per_client,
                "beta": self.dirichlet_beta,
            },
            "model": {
                "dim": self.model.dim,
                "layers": self.model.layers,
                "heads": self.model.heads,
                "patch_size": self.model.patch_size,
                "mix_layers": list(self.model.mix_layers),
                "tau": self.model.tau,
                "refresh_mix": self.model.refresh_mix,
                "detach_scores": self.model.detach_scores,
            },
            "train": {"clients": self.num_clients, **asdict(self.train)},
        }


def load_config(path: str, seed_override=None, out_override=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if seed_override is not None:
        raw["seed"] = seed_override
    if out_override is not None:
        raw["out_dir"] = out_override
    workers_env = os.environ.get(WORKERS_ENV)
    if workers_env:
        raw.setdefault("train", {})["workers"] = int(workers_env)
    return ExperimentConfig.from_dict(raw)


def make_partition(dataset, cfg: ExperimentConfig):
    if cfg.partition_mode == "pathological":
        return partition_pathological(dataset, cfg.num_clients,
                                      cfg.classes_per_client, cfg.seed)
    return partition_dirichlet(dataset, cfg.num_clients, cfg.dirichlet_beta,
                               cfg.seed)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(logs, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "train_loss", "mean_acc", "worst_acc",
                         "heldout_mean_acc", "heldout_worst_acc"])
        for log in logs:
            writer.writerow([
                log.round, _fmt(log.train_loss), _fmt(log.mean_acc),
                _fmt(log.worst_acc), _fmt(log.heldout_mean_acc),
                _fmt(log.heldout_worst_acc),
            ])


def write_prompts_csv(state, path):
    """Global prompt blocks (client -1) plus any per-client blocks."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "client", "row", "col", "value"])

        def emit(name, client, matrix):
            for r in range(matrix.shape[0]):
                for c in range(matrix.shape[1]):
                    writer.writerow([name, client, r, c, repr(float(matrix[r, c]))])

        for name, block in state.params.blocks():
            emit(name, -1, block.data)
        for cid in sorted(state.personal):
            shared, class_prompts = state.personal[cid]
            emit("shared", cid, shared)
            emit("class", cid, class_prompts)


def write_prototypes_csv(bank, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "class", "dim", "value"])
        if bank is not None:
            for layer, cls, dim, value in bank.export_rows():
                writer.writerow([layer, cls, dim, repr(float(value))])


def write_config_copy(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _final_report(cfg, state, logs, report, heldout_report):
    comm = comm_accounting(
        dim=cfg.model.dim, classes=cfg.data.classes,
        shared_prompts=cfg.train.shared_prompts,
        mix_layers=len(state.model_cfg.mix_layers),
        rounds=cfg.train.rounds, update_period=cfg.train.update_period)
    payload = {
        "version": __version__,
        "rounds": cfg.train.rounds,
        "strategy": cfg.train.strategy,
        "participating": {
            "clients": list(state.participating),
            **report.to_dict(),
        },
        "heldout": None if heldout_report is None else {
            "clients": list(state.heldout),
            **heldout_report.to_dict(),
        },
        "final_train_loss": logs[-1].train_loss,
        "communication": asdict(comm),
    }
    return payload


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = generate_synthetic(cfg.data, cfg.seed)
    partition = make_partition(dataset, cfg)
    clients = build_clients(dataset, partition)
    backbone = init_backbone(cfg.seed, cfg.model)
    heldout = ()
    if cfg.heldout_fraction > 0:
        _, heldout = heldout_split(range(cfg.num_clients),
                                   1.0 - cfg.heldout_fraction, cfg.seed)
    state, logs = run_training(clients, backbone, cfg.model, cfg.train,
                               cfg.seed, heldout=heldout)

    report = evaluate_clients(
        [state.client(c) for c in state.participating], backbone,
        state.model_cfg, state.bank, state.eval_params_lookup(),
        uniform_priors=cfg.train.strategy == "mixed_no_prior")
    heldout_report = None
    if heldout:
        heldout_report = evaluate_clients(
            [state.client(c) for c in heldout], backbone, state.model_cfg,
            state.bank, state.eval_params_lookup(),
            uniform_priors=cfg.train.strategy == "mixed_no_prior")

    write_config_copy(cfg, os.path.join(cfg.out_dir, "config.json"))
    write_metrics_csv(logs, os.path.join(cfg.out_dir, "metrics.csv"))
    write_prompts_csv(state, os.path.join(cfg.out_dir, "prompts.csv"))
    write_prototypes_csv(state.bank, os.path.join(cfg.out_dir, "prototypes.csv"))
    report.write_csv(os.path.join(cfg.out_dir, "client_accuracy.csv"))
    with open(os.path.join(cfg.out_dir, "final_report.json"), "w") as fh:
        json.dump(_final_report(cfg, state, logs, report, heldout_report),
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"run complete: mean_acc={report.mean_acc:.4f} "
          f"worst_acc={report.worst_acc:.4f} -> {cfg.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .model import gradient_check

    n_params = (args.dim * 1 + args.dim * args.classes
                + args.classes * args.dim)
    if n_params > 5000:
        raise ConfigError(
            f"{n_params} trainable parameters is too many for finite differences")
    report = gradient_check(seed=args.seed, dim=args.dim, layers=args.layers,
                            classes=args.classes, heads=args.heads)
    for name in ("shared", "class", "head"):
        print(f"{name}: max relative error {report[name]:.3e}")
    print(f"overall max relative error {report['max']:.3e} "
          f"(threshold {args.threshold:.0e})")
    return 0 if report["max"] < args.threshold else 1


def cmd_partition(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = generate_synthetic(cfg.data, cfg.seed)
    partition = make_partition(dataset, cfg)
    partition.write_csv(dataset, os.path.join(cfg.out_dir, "partition.csv"))
    hist = label_histograms(dataset, partition)
    with open(os.path.join(cfg.out_dir, "label_histogram.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "class", "count"])
        for client in range(hist.shape[0]):
            for cls in range(hist.shape[1]):
                writer.writerow([client, cls, int(hist[client, cls])])
    write_config_copy(cfg, os.path.join(cfg.out_dir, "config.json"))
    print(f"partition written to {cfg.out_dir}")
    return 0


def _load_prompts_csv(path, dim, classes, shared_prompts):
    blocks = {
        "shared": np.zeros((dim, shared_prompts)),
        "class": np.zeros((dim, classes)),
        "head": np.zeros((classes, dim)),
    }
    personal = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            client = int(row["client"])
            name = row["block"]
            r, c, v = int(row["row"]), int(row["col"]), float(row["value"])
            if client == -1:
                blocks[name][r, c] = v
            else:
                store = personal.setdefault(client, {
                    "shared": np.zeros((dim, shared_prompts)),
                    "class": np.zeros((dim, classes)),
                })
                store[name][r, c] = v
    params = PromptParams.from_arrays(blocks["shared"], blocks["class"],
                                      blocks["head"])
    return params, personal


def _load_prototypes_csv(path, layers, classes, dim):
    if not layers:
        return None
    bank = PrototypeBank(layers=tuple(layers), num_classes=classes, dim=dim)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bank.mu[int(row["layer"])][int(row["class"]), int(row["dim"])] = (
                float(row["value"]))
    return bank


def cmd_eval(args) -> int:
    run_dir = args.run_dir
    config_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(config_path):
        raise ConfigError(f"no config.json in {run_dir}")
    cfg = load_config(config_path)
    dataset = generate_synthetic(cfg.data, cfg.seed)
    partition = make_partition(dataset, cfg)
    clients = build_clients(dataset, partition)
    backbone = init_backbone(cfg.seed, cfg.model)
    model_cfg = (cfg.model if cfg.train.strategy != "shared_only"
                 else cfg.model.without_mixing())
    params, personal = _load_prompts_csv(
        os.path.join(run_dir, "prompts.csv"), cfg.model.dim,
        cfg.data.classes, cfg.train.shared_prompts)
    bank = _load_prototypes_csv(os.path.join(run_dir, "prototypes.csv"),
                                model_cfg.mix_layers, cfg.data.classes,
                                cfg.model.dim)

    def lookup(cid):
        if cfg.train.strategy == "personalized" and cid in personal:
            store = personal[cid]
            return PromptParams.from_arrays(store["shared"], store["class"],
                                            params.head.data)
        return params

    heldout = ()
    if cfg.heldout_fraction > 0:
        _, heldout = heldout_split(range(cfg.num_clients),
                                   1.0 - cfg.heldout_fraction, cfg.seed)
    heldout_set = set(heldout)
    participating = [c for c in clients if c.client_id not in heldout_set]
    uniform = cfg.train.strategy == "mixed_no_prior"
    report = evaluate_clients(participating, backbone, model_cfg, bank,
                              lookup, uniform_priors=uniform)
    payload = {"participating": report.to_dict()}
    if heldout:
        held_report = evaluate_clients(
            [c for c in clients if c.client_id in heldout_set], backbone,
            model_cfg, bank, lookup, uniform_priors=uniform)
        payload["heldout"] = held_report.to_dict()
    out_path = os.path.join(args.out or run_dir, "eval_report.json")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"eval report written to {out_path} "
          f"(mean_acc={report.mean_acc:.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprompt",
        description="Deterministic federated prompt tuning simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a training run")
    run_p.add_argument("--config", required=True, help="JSON config path")
    run_p.add_argument("--seed", type=int, help="override config seed")
    run_p.add_argument("--out", help="override output directory")
    run_p.set_defaults(func=cmd_run)

    grad_p = sub.add_parser("gradcheck",
                            help="autodiff vs finite differences")
    grad_p.add_argument("--seed", type=int, default=0)
    grad_p.add_argument("--dim", type=int, default=16)
    grad_p.add_argument("--layers", type=int, default=4)
    grad_p.add_argument("--classes", type=int, default=4)
    grad_p.add_argument("--heads", type=int, default=2)
    grad_p.add_argument("--threshold", type=float, default=1e-4)
    grad_p.set_defaults(func=cmd_gradcheck)

    part_p = sub.add_parser("partition",
                            help="write partition CSVs without training")
    part_p.add_argument("--config", required=True)
    part_p.add_argument("--seed", type=int)
    part_p.add_argument("--out")
    part_p.set_defaults(func=cmd_partition)

    eval_p = sub.add_parser("eval", help="re-evaluate a saved run")
    eval_p.add_argument("--run-dir", required=True)
    eval_p.add_argument("--out")
    eval_p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
