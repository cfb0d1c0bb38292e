#!/usr/bin/env python3
"""Render figures from simulator trace CSVs.

Reads only the documented trace format (header
``k,conv_err,model_var,accuracy,grad_noise,lyapunov,wall_ms`` with empty
cells for missing metrics) and the sweep summary format
(``value,conv_err_final,accuracy_final``); no coupling to the simulator's
internals.

Usage:
  plot.py --kind conv_err --out fig.png trace1.csv:LabelA trace2.csv:LabelB
  plot.py --kind sweep --out sweep.png sweep_dir/summary.csv
"""
from __future__ import annotations

import argparse
import csv
import math
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

KIND_COLUMN = {
    "conv_err": "conv_err",
    "accuracy": "accuracy",
    "variance": "model_var",
    "grad_noise": "grad_noise",
}
LOG_Y_KINDS = {"conv_err", "grad_noise"}
Y_LABEL = {
    "conv_err": "convergence error",
    "accuracy": "classification accuracy",
    "variance": "model variance",
    "grad_noise": "summed gradient variance",
}


class PlotError(Exception):
    pass


def parse_trace_arg(arg: str) -> tuple[str, str]:
    """Split 'path[:Label]'; keep drive-letter style prefixes intact."""
    if ":" in arg:
        path, _, label = arg.rpartition(":")
        if path and not label.endswith((".csv", "/")):
            return path, label
    return arg, arg


def read_trace(path: str) -> dict[str, list]:
    """Parse a trace CSV into columns; empty cells become None."""
    columns: dict[str, list] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise PlotError(f"{path}: cannot read: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "k":
            raise PlotError(f"{path}: line 1: expected a trace header starting with 'k'")
        for name in header:
            columns[name] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise PlotError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            for name, cell in zip(header, row):
                if cell == "":
                    columns[name].append(None)
                    continue
                try:
                    columns[name].append(float(cell))
                except ValueError:
                    raise PlotError(
                        f"{path}: line {lineno}: bad number '{cell}' in column {name}"
                    ) from None
    if not columns.get("k"):
        raise PlotError(f"{path}: no data rows")
    return columns


def logging_interval(ks: list[float]) -> float:
    diffs = [b - a for a, b in zip(ks, ks[1:]) if b > a]
    return min(diffs) if diffs else 1.0


def resample_to(ks: list[float], values: list, interval: float):
    """Keep rows whose round index sits on the coarsest logging grid."""
    kept_k, kept_v = [], []
    for k, v in zip(ks, values):
        if math.isclose(k % interval, 0.0, abs_tol=1e-9) or math.isclose(
            k % interval, interval, abs_tol=1e-9
        ):
            kept_k.append(k)
            kept_v.append(v)
    return kept_k, kept_v


def render_metric(kind: str, traces: list[tuple[str, str]], out: str, log_y: bool) -> int:
    column = KIND_COLUMN[kind]
    loaded = []
    for path, label in traces:
        cols = read_trace(path)
        if column not in cols or all(v is None for v in cols[column]):
            print(f"skip: {path} has no '{column}' values", file=sys.stderr)
            continue
        loaded.append((label, cols))
    if not loaded:
        raise PlotError(f"no trace provides the '{column}' metric")

    coarsest = max(logging_interval(cols["k"]) for _, cols in loaded)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, cols in loaded:
        ks, vals = resample_to(cols["k"], cols[column], coarsest)
        pairs = [(k, v) for k, v in zip(ks, vals) if v is not None]
        ax.plot([k for k, _ in pairs], [v for _, v in pairs], label=label, linewidth=1.4)
    ax.set_xlabel("round k")
    ax.set_ylabel(Y_LABEL[kind])
    if log_y:
        ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return 0


def read_summary(path: str) -> list[dict]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise PlotError(f"{path}: cannot read: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["value", "conv_err_final", "accuracy_final"]:
            raise PlotError(f"{path}: line 1: expected a sweep summary header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        "value": row["value"],
                        "conv": float(row["conv_err_final"]) if row["conv_err_final"] else None,
                        "acc": float(row["accuracy_final"]) if row["accuracy_final"] else None,
                    }
                )
            except (TypeError, ValueError):
                raise PlotError(f"{path}: line {lineno}: bad summary row") from None
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def render_sweep(summary_path: str, out: str) -> int:
    rows = read_summary(summary_path)
    labels = [r["value"] for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    convs = [r["conv"] for r in rows]
    if any(c is not None for c in convs):
        ax.plot(xs, convs, "o-", color="tab:blue", label="final convergence error")
        if all(c is not None and c > 0 for c in convs):
            ax.set_yscale("log")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_xlabel("swept value")
    ax.set_ylabel("final convergence error")
    accs = [r["acc"] for r in rows]
    if any(a is not None for a in accs):
        twin = ax.twinx()
        twin.plot(xs, accs, "s--", color="tab:orange", label="final accuracy")
        twin.set_ylabel("final accuracy")
        twin.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", required=True, choices=sorted(KIND_COLUMN) + ["sweep"])
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument(
        "--linear-y", action="store_true",
        help="force a linear y axis (conv_err and grad_noise default to log)",
    )
    parser.add_argument("traces", nargs="+", metavar="trace.csv[:Label]")
    args = parser.parse_args(argv)
    try:
        if args.kind == "sweep":
            if len(args.traces) != 1:
                raise PlotError("sweep takes exactly one summary.csv")
            return render_sweep(args.traces[0], args.out)
        log_y = args.kind in LOG_Y_KINDS and not args.linear_y
        return render_metric(args.kind, [parse_trace_arg(t) for t in args.traces], args.out, log_y)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
