"""Command-line experiment runner.

    fedsl run --seed 0 [--config FILE] [--KEY VALUE ...]
    fedsl sweep-prune --seed 0 [--values 0,0.35,0.5,0.7]
    fedsl bound PARAMS.json [--I-values 1,5,10] [--q-values 4,8]
    fedsl check-lemma2 RUN_DIR [--scale 0.5]
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from fedsl import analysis, config, snapshot
from fedsl.engine import METRICS_COLUMNS, RunResult, metrics_csv, run_experiment
from fedsl.errors import FedSLError

# sweep name -> (config key, default values, preset overrides)
SWEEPS = {
    "sweep-prune": ("rho_f", "0,0.35,0.5,0.7", {"I": 1, "p": 0.0}),
    "sweep-quant": ("q", "0,4,8", {"I": 1, "p": 0.0}),
    "sweep-agg": ("I", "1,5,10", {}),
    "sweep-split": ("L_c", None, {}),
    "sweep-clients": ("K", "1,2,5,10", {}),
    "sweep-dropout": ("p", "0,0.3,0.5,0.7", {}),
}


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value experiment file")
    parser.add_argument("--seed", type=int, required=True, help="global seed (mandatory)")
    for f in dataclasses.fields(config.ExperimentConfig):
        if f.name == "seed":
            continue
        parser.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE", help=argparse.SUPPRESS)


def _resolve_config(args, preset=None) -> config.ExperimentConfig:
    """Defaults < sweep preset < config file < command-line flags."""
    values = dict(preset or {})
    if args.config:
        values.update(config.read_config_values(Path(args.config).read_text()))
    for f in dataclasses.fields(config.ExperimentConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            values[f.name] = config.coerce(f.name, raw)
    values["seed"] = args.seed
    return config.ExperimentConfig(**values)


def _final_summary(result: RunResult) -> dict:
    last = result.metrics[-1]
    return {
        "round": last.round,
        "loss": last.loss,
        "accuracy": last.accuracy,
        "mean_sparsity": last.mean_sparsity,
        "cumulative_latency_s": last.cumulative_latency_s,
    }


def _sparsity_contract(result: RunResult) -> dict:
    events = [e for m in result.metrics for e in m.prune_events]
    bad = [dataclasses.asdict(e) for e in events if e.sparsity_after < e.target]
    return {"pruning_triggers": len(events), "violations": len(bad), "examples": bad[:5]}


def write_run(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out_dir / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out_dir / "config.txt").write_text(cfg.to_text())
    report = {
        "config": dataclasses.asdict(cfg),
        "final": _final_summary(result),
        "sparsity_contract": _sparsity_contract(result),
    }
    if result.trace is not None:
        report["lemma2"] = analysis.lemma2_empirical(result.trace).to_dict()
        report["lemma2_negative_control"] = analysis.lemma2_empirical(result.trace, scale=0.5).to_dict()
        if cfg.snapshot_every:
            snapshot.write_snapshot(out_dir / "snapshot.bin", result.trace, cfg.snapshot_every)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    result = run_experiment(cfg, record=True)
    out = Path(args.out or cfg.out_dir)
    write_run(result, out)
    final = _final_summary(result)
    print(
        f"wrote {out / 'metrics.csv'}: T={cfg.T} loss={final['loss']:.4f} "
        f"accuracy={final['accuracy']:.4f} sparsity={final['mean_sparsity']:.3f}"
    )
    return 0


def cmd_sweep(args) -> int:
    key, default_values, preset = SWEEPS[args.command]
    cfg0 = _resolve_config(args, preset)
    raw = args.values or default_values or ",".join(str(v) for v in range(1, cfg0.L))
    values = [config.coerce(key, v) for v in raw.split(",") if v.strip()]
    out_root = Path(args.out or Path(cfg0.out_dir).parent / args.command)
    rows = []
    for value in values:
        cfg = cfg0.replace(**{key: value})
        result = run_experiment(cfg, record=False)
        run_dir = out_root / f"{key}={value}"
        write_run(result, run_dir)
        last = result.metrics[-1]
        rows.append([value] + last.row()[1:])
        print(f"{key}={value}: loss={last.loss:.4f} accuracy={last.accuracy:.4f} "
              f"cumulative_latency_s={last.cumulative_latency_s:.6f}")
    with open(out_root / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([key] + METRICS_COLUMNS[1:])
        writer.writerows(rows)
    return 0


def _load_bound(path):
    raw = json.loads(Path(path).read_text())
    quant = raw.pop("quantizer", None)
    if quant is not None:
        raw["J_sq"] = analysis.quantizer_J_layers(quant["q"], quant["ranges"], quant["dims"])
    return analysis.BoundParams(**raw), quant


def _sign(v):
    if v is None:
        return "n/a"
    return "+" if v > 0 else ("-" if v < 0 else "0")


def cmd_bound(args) -> int:
    params, quant = _load_bound(args.params)
    rhs = analysis.theorem1_rhs(params)
    print(f"rhs = {rhs!r}")
    for name, value in analysis.theorem1_terms(params).items():
        print(f"  {name:<15} {value!r}")
    q = quant["q"] if quant else None
    table = analysis.monotonicity_table(
        params, q, quant["ranges"] if quant else None, quant["dims"] if quant else None
    )
    print("forward differences:")
    for name in ("d_I", "d_rho_f", "d_L_c", "d_q"):
        value = table[name]
        print(f"  {name:<8} {_sign(value):>3}  {'' if value is None else repr(value)}")
    if args.I_values:
        print("I sweep:")
        for I in (int(v) for v in args.I_values.split(",")):
            print(f"  I={I:<4} rhs={analysis.theorem1_rhs(params.replace(I=I))!r}")
    if args.q_values:
        if quant is None:
            raise FedSLError("--q-values needs a 'quantizer' block (q, ranges, dims) in the params file")
        print("q sweep:")
        for qv in (int(v) for v in args.q_values.split(",")):
            j = analysis.quantizer_J_layers(qv, quant["ranges"], quant["dims"])
            print(f"  q={qv:<4} rhs={analysis.theorem1_rhs(params.replace(J_sq=j))!r}")
    return 0


def cmd_check_lemma2(args) -> int:
    src = Path(args.source)
    snap = src / "snapshot.bin" if src.is_dir() else src
    if not snap.exists():
        raise FedSLError(f"{snap}: no snapshot (run with --snapshot_every N)")
    trace = snapshot.read_snapshot(snap)
    report = analysis.lemma2_empirical(trace, scale=args.scale)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(f"checks={report.n_checks} violations={report.n_violations} max_ratio={report.max_ratio!r}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsl", description="Lightweight federated split learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment; writes metrics.csv and report.json")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_run)

    for name, (key, default, preset) in SWEEPS.items():
        p = sub.add_parser(name, help=f"sweep {key}; one metrics.csv per setting")
        _add_config_flags(p)
        p.add_argument("--values", help=f"comma-separated {key} values (default: {default or '1..L-1'})")
        p.add_argument("--out", help="output directory for the sweep")
        p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bound", help="evaluate the convergence bound from a JSON params file")
    p.add_argument("params")
    p.add_argument("--I-values", dest="I_values", help="comma-separated aggregation intervals to tabulate")
    p.add_argument("--q-values", dest="q_values", help="comma-separated bit widths to tabulate")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("check-lemma2", help="check the client-drift lemma on a run snapshot")
    p.add_argument("source", help="run directory or snapshot.bin")
    p.add_argument("--scale", type=float, default=1.0, help="multiply estimated constants (negative control < 1)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_check_lemma2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(f"fedsl: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (FedSLError, OSError) as exc:
        print(f"fedsl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
