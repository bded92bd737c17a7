"""Command line interface.

Exit codes: 0 success, 2 input error, 3 fit error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .db import DatabaseError, generate_synthetic_database, load_database, save_database
from .e2e import (WorkloadError, compare_variants, explore_arch, explore_dvfs, load_workload, predict_workload,
                  result_csv_rows, save_workload, workload_from_trace)
from .frontend import parse_kernel_name
from .hwmodel import MHZ, ConfigError, load_config
from .refine import FitError
from .store import CoefficientStore, StoreError, fit_store

EXIT_OK, EXIT_INPUT, EXIT_FIT = 0, 2, 3


class InputError(Exception):
    pass


def _gpu_power(name, freq_mhz=None, volt=None):
    gpu, power = load_config(name)
    if power is None:
        raise InputError(f"GPU config {name} has no power section")
    if freq_mhz is not None or volt is not None:
        power = power.at_frequency((freq_mhz * MHZ) if freq_mhz is not None else power.core_freq, volt)
    return gpu, power


def _store(args):
    if args.store is None:
        if not args.allow_defaults:
            raise InputError("--store is required (or pass --allow-defaults)")
        return None
    return CoefficientStore.load(args.store)


def _emit(args, doc, rows=None, text=None):
    out = open(args.output, "w", newline="", encoding="utf-8") if getattr(args, "output", None) else sys.stdout
    try:
        if getattr(args, "csv", False) and rows is not None:
            w = csv.writer(out, lineterminator="\n")
            for row in rows:
                w.writerow(row)
        elif getattr(args, "json", False) or text is None:
            out.write(json.dumps(doc, indent=1) + "\n")
        else:
            out.write(text + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _summary(res) -> str:
    lines = [f"{res.name} on {res.gpu} @ {res.core_freq / MHZ:g} MHz, {res.core_voltage:.3f} V",
             f"  latency   {res.latency * 1e3:.4f} ms",
             f"  energy    {res.energy:.6g} J",
             f"  avg power {res.average_power:.2f} W",
             f"  operators {len(res.operators)} ({res.coverage['tile_sources']})"]
    if res.coverage["flagged"]:
        lines.append(f"  fallbacks at operator indices {res.coverage['flagged']}")
    return "\n".join(lines)


# -- subcommands ---------------------------------------------------------------------

def cmd_fit(args):
    gpu, power = _gpu_power(args.gpu)
    loaded = load_database(args.db, strict=args.strict)
    for d in loaded.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    if not loaded.records:
        raise FitError("database has no valid records")
    report = fit_store(loaded.records, gpu, power)
    report.store.metadata["source"] = str(args.db)
    report.store.save(args.output_store)
    for n in report.notes:
        print(f"note: {n}", file=sys.stderr)
    doc = {"store": str(args.output_store), "accepted": loaded.accepted, "rejected": loaded.rejected,
           "groups": {str(k): {"n": e.n_samples, "latency_rmse": e.latency_rmse, "power_rmse": e.power_rmse,
                               **e.latency.as_dict()} for k, e in report.store.groups.items()},
           "skipped": {str(k): v for k, v in report.skipped.items()},
           "unresolved": len(report.unresolved)}
    print(json.dumps(doc, indent=1))


def cmd_predict(args):
    gpu, power = _gpu_power(args.gpu, args.freq, args.volt)
    res = predict_workload(load_workload(args.workload), gpu, power, _store(args),
                           allow_defaults=args.allow_defaults, launch_overhead=args.launch_overhead)
    _emit(args, res.as_dict(), result_csv_rows(res), _summary(res))


def cmd_explore_dvfs(args):
    gpu, power = _gpu_power(args.gpu)
    try:
        freqs = [float(f) for f in args.freqs.split(",") if f.strip()]
    except ValueError:
        raise InputError(f"bad --freqs {args.freqs!r}") from None
    if not freqs:
        raise InputError("--freqs is empty")
    table = explore_dvfs(load_workload(args.workload), gpu, power, freqs, _store(args), voltage=args.volt,
                         allow_defaults=args.allow_defaults, launch_overhead=args.launch_overhead)
    rows = [("freq_mhz", "voltage", "latency_s", "energy_j", "average_power_w")]
    rows += [(f, r.core_voltage, repr(r.latency), repr(r.energy), repr(r.average_power)) for f, r in table]
    doc = [{"freq_mhz": f, "voltage": r.core_voltage, "latency_s": r.latency, "energy_j": r.energy,
            "average_power_w": r.average_power} for f, r in table]
    text = "\n".join(f"{f:7.1f} MHz  {r.core_voltage:.3f} V  {r.latency * 1e3:10.4f} ms  {r.average_power:8.2f} W  "
                     f"{r.energy:.6g} J" for f, r in table)
    _emit(args, doc, rows, text)


def cmd_explore_arch(args):
    gpu, power = _gpu_power(args.gpu, args.freq, args.volt)
    res = explore_arch(load_workload(args.workload), gpu, power, _store(args),
                       allow_defaults=args.allow_defaults, launch_overhead=args.launch_overhead)
    _emit(args, res.as_dict(), result_csv_rows(res), _summary(res))


def cmd_compare(args):
    gpu, power = _gpu_power(args.gpu, args.freq, args.volt)
    cmp = compare_variants(load_workload(args.base), load_workload(args.variant), gpu, power, _store(args),
                           allow_defaults=args.allow_defaults, launch_overhead=args.launch_overhead)
    doc = cmp.as_dict()
    rows = [tuple(doc), tuple(doc.values())]
    text = (f"{cmp.base.name} -> {cmp.variant.name}: speedup {cmp.speedup:.3f}x, "
            f"avg power {cmp.base.average_power:.1f} -> {cmp.variant.average_power:.1f} W, "
            f"energy x{cmp.energy_ratio:.3f}, DRAM bytes x{cmp.dram_ratio:.3f}")
    _emit(args, doc, rows, text)


def cmd_parse_names(args):
    try:
        names = [ln.strip() for ln in Path(args.file).read_text(encoding="utf-8").splitlines()]
    except OSError as exc:
        raise InputError(f"cannot read {args.file}: {exc}") from None
    names = [n for n in names if n and not n.startswith("#")]
    parsed = [parse_kernel_name(n) for n in names]
    keys = ["bm", "bn", "bk", "stages", "instr", "warp_grid", "precision", "layout"]
    doc = [{"name": p.name, "fields": {k: (list(v) if isinstance(v, tuple) else v) for k, v in p.fields.items()},
            "provenance": dict(p.provenance), "empty": p.empty} for p in parsed]
    rows = [["name"] + keys] + [[p.name] + [_cell(p.fields.get(k)) for k in keys] for p in parsed]
    args.json = args.json or not args.csv
    _emit(args, doc, rows)


def _cell(v):
    if v is None:
        return ""
    return "x".join(map(str, v)) if isinstance(v, tuple) else str(v)


def cmd_gen_synth(args):
    gpu, power = _gpu_power(args.gpu)
    recs = generate_synthetic_database(args.seed, gpu, power, shapes_per_group=args.shapes_per_group,
                                       sigma_latency=args.sigma, sigma_power=args.sigma)
    save_database(args.output_db, recs)
    print(json.dumps({"database": str(args.output_db), "records": len(recs), "seed": args.seed}))


def cmd_convert_trace(args):
    try:
        text = Path(args.trace).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {args.trace}: {exc}") from None
    w = workload_from_trace(text, name=args.name or Path(args.trace).stem)
    save_workload(args.output_workload, w)
    print(json.dumps({"workload": str(args.output_workload), "operators": len(w)}))


# -- parser --------------------------------------------------------------------------

def _common(p, freq=True, store=True, fmt=True):
    p.add_argument("--gpu", default="A100-PCIE", help="shipped GPU name or config YAML path")
    if freq:
        p.add_argument("--freq", type=float, help="core frequency in MHz (default: config reference)")
        p.add_argument("--volt", type=float, help="core voltage (default: from the V(f) table)")
    if store:
        p.add_argument("--store", help="coefficient store JSON written by 'fit'")
        p.add_argument("--allow-defaults", action="store_true",
                       help="run without a store: identity latency correction, no dynamic power")
        p.add_argument("--launch-overhead", type=float, default=0.0, metavar="SECONDS",
                       help="constant per-operator launch gap added to latency")
    if fmt:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--json", action="store_true")
        g.add_argument("--csv", action="store_true")
        p.add_argument("-o", "--output", help="write the result here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tilewatt", description="Kernel-level GPU latency and power prediction.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a coefficient store from a measurement database")
    p.add_argument("db")
    p.add_argument("-o", "--output-store", required=True)
    p.add_argument("--gpu", default="A100-PCIE")
    p.add_argument("--strict", action="store_true", help="fail on the first bad database row")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict latency and power of a workload")
    p.add_argument("workload")
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explore-dvfs", help="sweep core frequency")
    p.add_argument("workload")
    p.add_argument("--freqs", required=True, help="comma separated MHz list")
    _common(p, freq=False)
    p.add_argument("--volt", type=float, help="pin the core voltage instead of using the V(f) table")
    p.set_defaults(func=cmd_explore_dvfs)

    p = sub.add_parser("explore-arch", help="predict on a different GPU description")
    p.add_argument("workload")
    _common(p)
    p.set_defaults(func=cmd_explore_arch)

    p = sub.add_parser("compare", help="compare two workload variants")
    p.add_argument("base")
    p.add_argument("variant")
    _common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("parse-names", help="extract tile parameters from kernel names, one per line")
    p.add_argument("file")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--json", action="store_true")
    g.add_argument("--csv", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_parse_names)

    p = sub.add_parser("gen-synth", help="write a synthetic ground-truth database")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output-db", default="synthetic_db.csv")
    p.add_argument("--gpu", default="A100-PCIE")
    p.add_argument("--shapes-per-group", type=int, default=50)
    p.add_argument("--sigma", type=float, default=0.02, help="multiplicative noise level")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("convert-trace", help="convert a plain operator trace to a workload file")
    p.add_argument("trace")
    p.add_argument("-o", "--output-workload", required=True)
    p.add_argument("--name")
    p.set_defaults(func=cmd_convert_trace)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        args.func(args)
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (InputError, WorkloadError, DatabaseError, ConfigError, StoreError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
