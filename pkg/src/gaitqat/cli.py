"""Command-line entry point: ``python -m gaitqat <command>``.

Run configs are JSON objects with optional sections ``dataset``, ``model``,
``quant``, ``plan``, ``schedule`` and ``calibration`` plus top-level ``seed``
and ``out``. Missing keys take their defaults, unknown keys are rejected, and
the fully resolved config is hashed; every artifact records that hash and the
seed. Failures print one JSON line ``{"error": <kind>, "message": <text>}`` on
stderr and exit with status 2 (bad input) or 1 (numerical or training failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import theory
from .checkpoint import config_hash, load_lowered, load_model, save_lowered, save_model
from .errors import ConfigError, GaitQATError, UsageError
from .gaitnet import GaitNet, ModelSpec, QuantPolicy
from .intinfer import int_retrieval, lower, timing_report, write_timing_csv
from .losses import LossWeights
from .metrics import (MetricsReport, bitops, evaluate, format_giga, gaitbase_layer_table, layer_bitops,
                      model_layer_costs)
from .synthdata import DatasetConfig, generate_from_config, load_dataset, save_dataset, stack_frames
from .trainer import (KSchedule, TrainPlan, calibrate_with_idc, convergence_contrast, distill_finetune,
                      stage1_train, stage2_finetune, write_contrast_csv, write_trace_csv)

# ---------------------------------------------------------------------------
# run config


@dataclass
class ModelSection:
    channels: list = field(default_factory=lambda: [8, 16])
    n_parts: int = 4
    dim: int = 32


@dataclass
class QuantSection:
    weight_bits: int | None = None
    act_bits: int | None = None
    boundary_bits: int | None = None
    soft_forward: bool = False


@dataclass
class CalibrationSection:
    idc: float = 1.0
    kd: float = 0.0
    temperature: float = 1.0
    soft: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    quant: QuantSection = field(default_factory=QuantSection)
    plan: TrainPlan = field(default_factory=TrainPlan)
    schedule: KSchedule = field(default_factory=KSchedule)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)

    def resolved(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d["dataset"]["seed"] = self.seed
        d["plan"]["seed"] = self.seed
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.resolved())

    def provenance(self, **extra) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, **extra}

    def dataset_config(self) -> DatasetConfig:
        return replace(self.dataset, seed=self.seed)

    def train_plan(self) -> TrainPlan:
        return replace(self.plan, seed=self.seed)

    def model_spec(self) -> ModelSpec:
        ds = self.dataset
        q = self.quant
        return ModelSpec(channels=tuple(self.model.channels), n_parts=self.model.n_parts, dim=self.model.dim,
                         n_classes=ds.n_ids, height=ds.H, width=ds.W,
                         quant=QuantPolicy(q.weight_bits, q.act_bits, boundary_bits=q.boundary_bits,
                                           soft_forward=q.soft_forward))


def _section(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_run_config(raw: dict) -> RunConfig:
    sections = {"dataset": DatasetConfig, "model": ModelSection, "quant": QuantSection, "plan": TrainPlan,
                "schedule": KSchedule, "calibration": CalibrationSection}
    top = {"seed", "out", *sections}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {}
    for name, cls in sections.items():
        if name not in raw:
            continue
        sub = dict(raw[name])
        if name == "plan" and "weights" in sub:
            sub["weights"] = _section(LossWeights, sub["weights"], "plan.weights")
        if name in ("dataset", "plan") and "seed" in sub:
            raise ConfigError(f"set the seed at top level, not in {name}")
        kw[name] = _section(cls, sub, name)
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["seed"] = raw["seed"]
    if "out" in raw:
        kw["out"] = str(raw["out"])
    cfg = RunConfig(**kw)
    cfg.dataset_config().validate()
    cfg.train_plan().validate()
    cfg.model_spec().validate()
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    return parse_run_config(raw)


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out if getattr(args, "out", None) else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return _load_data(args.data)
    return generate_from_config(cfg.dataset_config())


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {exc.filename}") from None


def _load_ckpt(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_model(path)


def _tag(prov: dict) -> str:
    return f"config_hash={prov.get('config_hash')} seed={prov.get('seed')}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo(msg: str) -> None:
    print(msg)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    save_dataset(generate_from_config(cfg.dataset_config()), out, cfg.provenance())
    _echo(f"wrote dataset to {out}")


def cmd_train(args) -> None:
    cfg = load_run_config(args.config)
    out = _out_dir(args, cfg)
    split = _split(args, cfg)
    spec = cfg.model_spec()
    if args.init:
        base, _ = _load_ckpt(args.init)
        model = base.requantize(spec.quant)
    else:
        model = GaitNet(spec, seed=cfg.seed)
    model, trace = stage1_train(model, split, cfg.train_plan())
    prov = cfg.provenance(stage="stage1", init=args.init)
    save_model(model, out / "stage1.qgkt", prov)
    write_trace_csv(trace, out / "stage1_trace.csv", _tag(prov))
    _echo(f"wrote {out / 'stage1.qgkt'}")


def cmd_finetune(args) -> None:
    cfg = load_run_config(args.config)
    out = _out_dir(args, cfg)
    model, _ = _load_ckpt(args.from_ckpt)
    model, trace = stage2_finetune(model, _split(args, cfg), cfg.train_plan(), cfg.schedule)
    prov = cfg.provenance(stage="stage2", init=args.from_ckpt)
    save_model(model, out / "stage2.qgkt", prov)
    write_trace_csv(trace, out / "stage2_trace.csv", _tag(prov))
    _echo(f"wrote {out / 'stage2.qgkt'}")


def cmd_calibrate(args) -> None:
    cfg = load_run_config(args.config)
    out = _out_dir(args, cfg)
    student, _ = _load_ckpt(args.student)
    teacher, _ = _load_ckpt(args.teacher)
    c = cfg.calibration
    plan = cfg.train_plan()
    plan = replace(plan, weights=replace(plan.weights, idc=c.idc, kd=c.kd, temperature=c.temperature))
    schedule = cfg.schedule if c.soft else None
    if c.kd:
        model, trace = distill_finetune(student, teacher, _split(args, cfg), plan, plan.weights, schedule)
    else:
        model, trace = calibrate_with_idc(student, teacher, _split(args, cfg), plan, schedule)
    prov = cfg.provenance(stage="calibrate", student=args.student, teacher=args.teacher)
    save_model(model, out / "calibrated.qgkt", prov)
    write_trace_csv(trace, out / "calibrate_trace.csv", _tag(prov))
    _echo(f"wrote {out / 'calibrated.qgkt'}")


def _report_dict(report: MetricsReport) -> dict:
    return json.loads(report.to_json())


def cmd_eval(args) -> None:
    model, meta = _load_ckpt(args.ckpt)
    split = _load_data(args.data)
    prov = meta.get("provenance", {})
    report = evaluate(model, split, config={"config_hash": prov.get("config_hash"), "seed": prov.get("seed"),
                                            "checkpoint": str(args.ckpt), "data_seed": split.config.seed})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    _echo(f"rank1={report.rank1:.4f} mAP={report.mAP:.4f} mINP={report.mINP:.4f} bitops={report.bitops_g}G")


def cmd_analyze_theory(args) -> None:
    if args.verify:
        problems = theory.verify_theory_curves(args.verify)
        if problems:
            raise ConfigError("; ".join(problems))
        _echo(f"{args.verify}: ok")
        return
    if args.out is None:
        raise UsageError("--out is required unless --verify is given")
    prov = {"config_hash": config_hash({"kmin": args.kmin, "kmax": args.kmax, "n": args.n}), "seed": None}
    theory.export_theory_curves(args.kmin, args.kmax, args.n, args.out, provenance=_tag(prov))
    _echo(f"wrote {args.out}")


def cmd_bitops(args) -> None:
    if args.gaitbase:
        b = args.bits
        layers = gaitbase_layer_table(b_w=b, b_a=b)
        prov = {"config_hash": config_hash({"gaitbase": True, "bits": b}), "seed": None}
    else:
        if not args.ckpt:
            raise UsageError("give --ckpt or --gaitbase")
        model, meta = _load_ckpt(args.ckpt)
        layers = model_layer_costs(model)
        prov = meta.get("provenance", {})
    rows = [[s.name, s.c_in, s.c_out, s.f, s.n, s.h, s.w, s.b_w, s.b_a, repr(layer_bitops(s))] for s in layers]
    total = bitops(layers)
    header = ["layer", "c_in", "c_out", "f", "n", "h", "w", "b_w", "b_a", "bitops"]
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        target.write(f"# {_tag(prov)}\n")
        w = csv.writer(target, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        w.writerow(["total", "", "", "", "", "", "", "", "", repr(total)])
    finally:
        if args.out:
            target.close()
    if args.out:
        _echo(f"total {format_giga(total)} G BitOPs")


def cmd_contrast_k(args) -> None:
    cfg = load_run_config(args.config)
    try:
        ks = [float(k) for k in args.k.split(",") if k]
    except ValueError:
        raise ConfigError(f"--k must be a comma-separated list of numbers, got {args.k!r}") from None
    if not ks:
        raise ConfigError("--k needs at least one value")
    split = _split(args, cfg)
    spec = cfg.model_spec()
    if spec.quant.weight_bits is None:
        raise ConfigError("contrast-k needs a quantized model (set quant.weight_bits)")
    traces = convergence_contrast(split, cfg.train_plan(), ks, lambda: GaitNet(spec, seed=cfg.seed))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_contrast_csv(traces, args.out, _tag(cfg.provenance()))
    _echo(f"wrote {args.out}")


def cmd_export_embeddings(args) -> None:
    model, meta = _load_ckpt(args.ckpt)
    split = _load_data(args.data)
    from . import tensor as tn

    rows = []
    for name, seqs in (("gallery", split.gallery), ("probe", split.probe)):
        frames = stack_frames(seqs)
        with tn.no_grad():
            emb = np.concatenate([model.embed(frames[i:i + 16]).data for i in range(0, len(frames), 16)])
        emb = emb.reshape(len(seqs), -1)
        for s, e in zip(seqs, emb):
            rows.append([name, s.identity, s.seq_id, s.covariate] + [repr(float(v)) for v in e])
    with open(args.out, "w", newline="") as fh:
        fh.write(f"# {_tag(meta.get('provenance', {}))}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "identity", "seq_id", "covariate"] + [f"e{i}" for i in range(len(rows[0]) - 4)])
        w.writerows(rows)
    _echo(f"wrote {len(rows)} embeddings to {args.out}")


def cmd_lower(args) -> None:
    model, meta = _load_ckpt(args.ckpt)
    layers = lower(model)
    save_lowered(layers, model.spec, args.out, {**meta.get("provenance", {}), "lowered_from": str(args.ckpt)})
    _echo(f"wrote {args.out}")


def cmd_int_eval(args) -> None:
    if not Path(args.lowered).exists():
        raise UsageError(f"lowered model not found: {args.lowered}")
    layers, spec, meta = load_lowered(args.lowered)
    split = _load_data(args.data)
    r = int_retrieval(layers, split, spec.n_parts)
    prov = meta.get("provenance", {})
    report = {**r, "config": {"config_hash": prov.get("config_hash"), "seed": prov.get("seed"),
                              "lowered": str(args.lowered)}}
    if args.out:
        _write_json(Path(args.out), report)
    if args.timing_out:
        model = GaitNet(spec, seed=0, attach=False)
        frames = stack_frames(split.probe[:8])
        write_timing_csv(timing_report(layers, model, frames, args.repetitions), args.timing_out, _tag(prov))
    _echo(f"rank1={r['rank1']:.4f} mAP={r['mAP']:.4f} mINP={r['mINP']:.4f}")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitqat", description="Quantization-aware training toolkit for a toy gait model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=fn)
        return s

    s = add("gen-data", cmd_gen_data, "render the synthetic silhouette dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = add("train", cmd_train, "stage-1 straight-through training")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset directory (default: render from the config)")
    s.add_argument("--init", help="initialise weights from this checkpoint")
    s.add_argument("--out")

    s = add("finetune", cmd_finetune, "stage-2 soft-quantizer fine-tuning")
    s.add_argument("--config")
    s.add_argument("--from", dest="from_ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--out")

    s = add("calibrate", cmd_calibrate, "inter-class distance calibration (or logit KD)")
    s.add_argument("--config")
    s.add_argument("--student", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--data")
    s.add_argument("--out")

    s = add("eval", cmd_eval, "retrieval metrics and BitOPs of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = add("analyze-theory", cmd_analyze_theory, "gradient-moment and soft-quantizer curves")
    s.add_argument("--kmin", type=float, default=1.0)
    s.add_argument("--kmax", type=float, default=10.0)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--out")
    s.add_argument("--verify", metavar="CSV", help="re-check an exported curve file instead")

    s = add("bitops", cmd_bitops, "per-layer and total BitOPs")
    s.add_argument("--ckpt")
    s.add_argument("--gaitbase", action="store_true", help="use the GaitBase-style layer table")
    s.add_argument("--bits", type=int, default=32, help="bit width for --gaitbase")
    s.add_argument("--out")

    s = add("contrast-k", cmd_contrast_k, "STE versus fixed-k soft-quantizer training from scratch")
    s.add_argument("--config")
    s.add_argument("--k", default="2,5")
    s.add_argument("--data")
    s.add_argument("--out", required=True)

    s = add("export-embeddings", cmd_export_embeddings, "gallery and probe embeddings as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = add("lower", cmd_lower, "convert a quantized checkpoint to integer layers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)

    s = add("int-eval", cmd_int_eval, "retrieval metrics through the integer path")
    s.add_argument("--lowered", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--timing-out", help="also write a per-layer timing CSV (wall-clock, not deterministic)")
    s.add_argument("--repetitions", type=int, default=10)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, UsageError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except GaitQATError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": f"{exc.strerror}: {exc.filename}"}), file=sys.stderr)
        return 2
    return 0
