"""``micro`` command line: synth, train, evaluate, sweep and pilot.

Configuration is a flat text file of ``key = value`` lines with dotted keys
(``trainer.beta = 0.03``); ``--set key=value`` overrides any line.
Exit codes: 0 success, 2 usage/config/data error, 3 incompatible artifact,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    TEST,
    InteractionTable,
    SplitSpec,
    generate_synthetic,
    load_features,
    load_interactions,
    make_split,
    save_interactions,
    write_features,
    write_split_json,
)
from .errors import ConfigError, IncompatibleArtifactError, MicroError, NumericalError
from .recommender import MicroModel, TrainerConfig, train

log = logging.getLogger("micro")

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_AXES = {"k": "k", "lambda": "lam", "beta": "beta", "L": "layers", "modality": "modalities"}
CHECKPOINT_NAME = "checkpoint.mck"
METRICS_NAME = "metrics.jsonl"
RESOLVED_NAME = "config.resolved.cfg"


# ---------------------------------------------------------------------------
# config files


def parse_value(text: str):
    """Scalars are bool, int, float or string; commas make a list."""
    text = text.strip()
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        # a one-element list needs a trailing comma to survive a round trip
        body = ", ".join(format_value(v) for v in value)
        return body + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    raw = read_config_text(text, str(path))
    # relative data paths are relative to the config file
    for key, value in raw.items():
        if key.startswith("data.") and isinstance(value, str) and not Path(value).is_absolute():
            raw[key] = str((path.parent / value).resolve())
    return raw


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    out = dict(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = f"trainer.{key}"
        out[key] = parse_value(value)
    return out


def _coerce(field_type, default, value, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if value in ("", "all"):
            return ()
        return tuple(value) if isinstance(value, list) else (str(value),)
    return str(value)


def trainer_from_raw(raw: dict) -> TrainerConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainerConfig)}
    defaults = TrainerConfig()
    kwargs = {}
    for key, value in raw.items():
        if not key.startswith("trainer."):
            continue
        name = key[len("trainer."):]
        if name not in fields:
            raise ConfigError(f"unknown trainer option {name!r}")
        kwargs[name] = _coerce(fields[name].type, getattr(defaults, name), value, key)
    return TrainerConfig(**kwargs)


@dataclass
class ExperimentConfig:
    interactions: str | None = None
    manifest: str | None = None
    features: dict[str, str] = field(default_factory=dict)
    split: SplitSpec = field(default_factory=SplitSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    out_dir: str = "out"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_raw(cls, raw: dict) -> "ExperimentConfig":
        known = {"data", "split", "trainer", "output", "synth", "evaluate", "pilot", "sweep"}
        for key in raw:
            if key.split(".", 1)[0] not in known:
                raise ConfigError(f"unknown config section in key {key!r}")
        trainer = trainer_from_raw(raw)
        ratios = raw.get("split.ratios", [0.8, 0.1, 0.1])
        if not isinstance(ratios, list) or len(ratios) != 3:
            raise ConfigError("split.ratios needs three comma-separated numbers")
        split = SplitSpec(
            mode=str(raw.get("split.mode", "warm")),
            ratios=tuple(float(r) for r in ratios),
            cold_fraction=float(raw.get("split.cold_fraction", 0.2)),
            seed=int(raw.get("split.seed", trainer.seed)),
        )
        features = {k[len("data.features."):]: str(v) for k, v in raw.items() if k.startswith("data.features.")}
        extra = {k: v for k, v in raw.items()
                 if k.split(".", 1)[0] in ("synth", "evaluate", "pilot", "sweep")}
        return cls(
            interactions=raw.get("data.interactions"),
            manifest=raw.get("data.manifest"),
            features=features,
            split=split,
            trainer=trainer,
            out_dir=str(raw.get("output.dir", "out")),
            extra=extra,
        )

    def to_raw(self) -> dict:
        raw = {}
        if self.interactions:
            raw["data.interactions"] = self.interactions
        if self.manifest:
            raw["data.manifest"] = self.manifest
        for m, p in sorted(self.features.items()):
            raw[f"data.features.{m}"] = p
        raw["split.mode"] = self.split.mode
        raw["split.ratios"] = list(self.split.ratios)
        raw["split.cold_fraction"] = self.split.cold_fraction
        raw["split.seed"] = self.split.seed
        for name, value in self.trainer.to_dict().items():
            raw[f"trainer.{name}"] = list(value) if isinstance(value, (list, tuple)) else value
        raw["output.dir"] = self.out_dir
        raw.update(self.extra)
        return raw

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.to_raw().items()))

    def digest(self) -> str:
        """64-bit hash of the sorted serialization, output location excluded."""
        raw = {k: v for k, v in self.to_raw().items() if k != "output.dir"}
        text = "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(raw.items()))
        return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def load_experiment(args) -> ExperimentConfig:
    raw = read_config(args.config) if getattr(args, "config", None) else {}
    raw = apply_overrides(raw, getattr(args, "set", None))
    if getattr(args, "out", None):
        raw["output.dir"] = args.out
    return ExperimentConfig.from_raw(raw)


# ---------------------------------------------------------------------------
# data


def load_dataset(cfg: ExperimentConfig, mode: str | None = None) -> tuple[InteractionTable, dict[str, np.ndarray]]:
    if not cfg.interactions:
        raise ConfigError("data.interactions is not set")
    if not cfg.features:
        raise ConfigError("no data.features.<modality> paths are set")
    if not cfg.manifest:
        raise ConfigError("data.manifest is not set")
    for p in [cfg.interactions, cfg.manifest, *cfg.features.values()]:
        if not Path(p).exists():
            raise ConfigError(f"file not found: {p}")
    table = load_interactions(cfg.interactions)
    features = {m: load_features(p, cfg.manifest, table) for m, p in sorted(cfg.features.items())}
    spec = cfg.split if mode is None else dataclasses.replace(cfg.split, mode=mode)
    return make_split(table, spec), features


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_experiment(args)
    ex = cfg.extra
    dims = {k[len("synth.dims."):]: int(v) for k, v in ex.items() if k.startswith("synth.dims.")}
    per_user = ex.get("synth.per_user", [10, 14])
    if not isinstance(per_user, list) or len(per_user) != 2:
        raise ConfigError("synth.per_user needs two comma-separated integers")
    users = int(ex.get("synth.users", 200))
    items = int(ex.get("synth.items", 100))
    if users < 1 or items < 1:
        raise ConfigError(f"synth needs positive user and item counts, got {users} users, {items} items")
    data = generate_synthetic(
        users=users, items=items, dims=dims or None,
        rank=int(ex.get("synth.rank", 8)), noise=float(ex.get("synth.noise", 0.1)),
        seed=int(ex.get("synth.seed", cfg.trainer.seed)),
        per_user=(int(per_user[0]), int(per_user[1])),
        temperature=float(ex.get("synth.temperature", 0.5)),
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_interactions(data.table, out / "interactions.tsv")
    (out / "items.txt").write_text("".join(f"{i}\n" for i in data.table.item_ids), encoding="utf-8")
    lines = ["data.interactions = interactions.tsv\n", "data.manifest = items.txt\n"]
    for m, f in data.features.items():
        write_features(f, out / f"{m}.mfv")
        lines.append(f"data.features.{m} = {m}.mfv\n")
    (out / "data.cfg").write_text("".join(lines), encoding="utf-8")
    print(_dump_json({"out": str(out), "users": data.table.n_users, "items": data.table.n_items,
                      "interactions": len(data.table), "modalities": sorted(data.features)}))
    return EXIT_OK


def run_training(cfg: ExperimentConfig, out: Path | None) -> dict:
    """Train, then (optionally) write artifacts; returns the final test record."""
    table, features = load_dataset(cfg)
    metrics = io.StringIO()

    def on_record(rec):
        metrics.write(_dump_json(rec) + "\n")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / RESOLVED_NAME).write_text(cfg.to_text(), encoding="utf-8")
        write_split_json(table, cfg.split, out / "split.json")
    meta = {"n_users": table.n_users, "n_items": table.n_items, "protocol": cfg.split.mode,
            "modalities": sorted(features), "config_hash": cfg.digest()}
    try:
        result = train(cfg.trainer, table, features, protocol=cfg.split.mode, on_record=on_record)
    except NumericalError as exc:
        partial = getattr(exc, "result", None)
        if out is not None and partial is not None:
            save_checkpoint(out / CHECKPOINT_NAME, cfg.trainer, partial.params, partial.adam,
                            partial.best_epoch, partial.best_metric, partial.epochs_run, meta)
            (out / METRICS_NAME).write_text(metrics.getvalue(), encoding="utf-8")
        raise
    test = evaluation.evaluate(result.model, result.params, table, cfg.split.mode,
                               cfg.trainer.eval_k, split=TEST)
    record = {"epoch": result.best_epoch, "split": "test", **test.to_dict(),
              "config_hash": cfg.trainer.digest(), "seed": cfg.trainer.seed}
    on_record(record)
    if out is not None:
        save_checkpoint(out / CHECKPOINT_NAME, cfg.trainer, result.params, result.adam,
                        result.best_epoch, result.best_metric, result.epochs_run, meta)
        (out / METRICS_NAME).write_text(metrics.getvalue(), encoding="utf-8")
    return record


def cmd_train(args) -> int:
    cfg = load_experiment(args)
    record = run_training(cfg, Path(cfg.out_dir))
    log.info("best epoch %s, test %s", record["epoch"], record)
    print(_dump_json(record))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    protocols = args.protocol or [cfg.split.mode]
    ks = args.k or [ckpt.config.eval_k]
    records = []
    for protocol in protocols:
        table, features = load_dataset(cfg, mode=protocol)
        model = MicroModel(ckpt.config, table, features)
        reports = evaluation.evaluate(model, ckpt.params, table, protocol, list(ks), split=TEST)
        records.extend(r.to_dict() for r in reports)
    print(json.dumps(records, indent=2, sort_keys=True))
    return EXIT_OK


def _sweep_value(axis: str, value, modalities: list[str]):
    if axis == "modality":
        value = str(value)
        if value in ("both", "all"):
            return tuple(modalities)
        if value not in modalities:
            raise ConfigError(f"unknown modality {value!r}; available: {modalities}")
        return (value,)
    if axis in ("k", "L"):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{axis} values must be integers")
        return value
    return float(value)


def _sweep_one(job) -> list:
    cfg, axis, label = job
    rec = run_training(cfg, None)
    k = cfg.trainer.eval_k
    return [axis, label, rec[f"recall@{k}"], rec[f"precision@{k}"], rec[f"ndcg@{k}"]]


def cmd_sweep(args) -> int:
    cfg = load_experiment(args)
    axis = args.axis or cfg.extra.get("sweep.axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"invalid sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = args.values if args.values is not None else cfg.extra.get("sweep.values")
    if values is None:
        raise ConfigError("no sweep values given")
    if isinstance(values, str):
        values = parse_value(values)
    if not isinstance(values, list):
        values = [values]
    modalities = sorted(cfg.features)
    jobs = []
    for v in values:
        field_value = _sweep_value(axis, v, modalities)
        trainer = cfg.trainer.replace(**{SWEEP_AXES[axis]: field_value})
        jobs.append((dataclasses.replace(cfg, trainer=trainer), axis, format_value(v)))
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    k = cfg.trainer.eval_k
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["axis", "value", f"recall@{k}", f"precision@{k}", f"ndcg@{k}"])
    writer.writerows(rows)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{axis}.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_pilot(args) -> int:
    cfg = load_experiment(args)
    if not cfg.interactions:
        raise ConfigError("data.interactions is not set")
    table = load_interactions(cfg.interactions)
    features = {m: load_features(p, cfg.manifest, table) for m, p in sorted(cfg.features.items())}
    k_list = args.k_list or cfg.extra.get("pilot.k_list", [5, 10, 15, 20])
    if not isinstance(k_list, list):
        k_list = [k_list]
    sims = evaluation.pilot_cointeraction_similarity(features, table)
    props = evaluation.pilot_similar_purchase_proportion(features, table, k_list)
    report = {
        "cointeraction_similarity": sims,
        "similar_purchase_proportion": {m: {str(k): v for k, v in p.items()} for m, p in props.items()},
        "co_interacted_exceeds_all_pairs": {m: s["co_interacted"] > s["all_pairs"] for m, s in sims.items()},
        "nondecreasing_in_k": {m: bool(np.all(np.diff([p[k] for k in sorted(p)]) >= 0))
                               for m, p in props.items()},
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micro", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (bare keys mean trainer.KEY)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        return p

    common(sub.add_parser("synth", help="write a synthetic dataset")).set_defaults(func=cmd_synth)
    common(sub.add_parser("train", help="train and write checkpoint + metrics")).set_defaults(func=cmd_train)
    p = common(sub.add_parser("evaluate", help="score a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--protocol", nargs="+", choices=evaluation.PROTOCOLS)
    p.set_defaults(func=cmd_evaluate)
    p = common(sub.add_parser("sweep", help="one training run per value of an axis"))
    p.add_argument("--axis")
    p.add_argument("--values", type=parse_value, help="comma-separated values")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    p = common(sub.add_parser("pilot", help="feature similarity vs co-interaction statistics"))
    p.add_argument("--k-list", type=int, nargs="+")
    p.set_defaults(func=cmd_pilot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except IncompatibleArtifactError as exc:
        print(f"micro: incompatible artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"micro: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MicroError, ValueError, OSError) as exc:
        print(f"micro: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
