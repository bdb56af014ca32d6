"""Command-line front end: run, sweep, plot, verify.

``run`` executes every plan in a config (one output directory per plan,
named by a content hash of the effective config); ``sweep`` additionally
aggregates mean/std across plans that differ only in the master seed;
``plot`` renders ASR (solid) and C-Acc (dashed) curves to SVG; ``verify``
executes the built-in oracle/invariant suite.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PlanBundle, group_key, parse_config, with_master_seed
from .errors import FedsimError
from .orchestrator import ExperimentResult, run_experiment
from .params import tag_manifest, tree_to_bytes
from .svg import Series, render_curves

log = logging.getLogger("fedsim")


def _write_checkpoints(result: ExperimentResult, outdir: Path) -> None:
    ckpt = outdir / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def dump(name: str, tree) -> None:
        (ckpt / f"{name}.params").write_bytes(tree_to_bytes(tree))
        (ckpt / f"{name}.tags").write_text(tag_manifest(tree))

    server = result.server
    if isinstance(server, list):
        for i, tree in enumerate(server):
            dump(f"component_{i}", tree)
    else:
        dump("global", server)
    for state in result.states:
        if state.personal is not None:
            dump(f"client_{state.client_id}", state.personal)
    suffix = {"simple_tuning": "-st", "ft_linear": "-ftl", "finetune": "-ft"}
    mode = (result.log.summary.get("posthoc") or {}).get("mode")
    for cid, tree in result.posthoc_models.items():
        dump(f"client_{cid}{suffix.get(mode, '-tuned')}", tree)


def _plot_log_csv(csv_text: str, label: str) -> list[Series]:
    lines = [ln for ln in csv_text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    idx = {name: i for i, name in enumerate(header)}
    rounds, c_accs, asrs = [], [], []
    for line in lines[1:]:
        cells = line.split(",")
        rounds.append(float(cells[idx["round"]]))
        c_accs.append(float(cells[idx["c_acc"]]))
        asr = cells[idx["asr"]]
        asrs.append(float(asr) if asr else None)
    series = []
    asr_points = [(r, a) for r, a in zip(rounds, asrs) if a is not None]
    if asr_points:
        series.append(Series(f"{label} ASR", [p[0] for p in asr_points],
                             [p[1] for p in asr_points], dashed=False))
    series.append(Series(f"{label} C-Acc", rounds, c_accs, dashed=True))
    return series


def execute_bundle(bundle: PlanBundle, outroot: Path) -> dict:
    """Run one plan and write its artifacts; returns the run summary."""
    outdir = outroot / bundle.run_id
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.echo.toml").write_text(bundle.echo())
    result = run_experiment(bundle.plan)
    (outdir / "metrics.csv").write_text(result.log.to_csv())
    summary = {
        "run_id": bundle.run_id,
        "config": bundle.sections,
        "summary": result.log.summary,
    }
    (outdir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    svg = render_curves(_plot_log_csv(result.log.to_csv(), bundle.run_id[:6]),
                        title=f"run {bundle.run_id}")
    (outdir / "curves.svg").write_text(svg)
    _write_checkpoints(result, outdir)
    log.info("run %s: final c_acc=%.4f asr=%s", bundle.run_id,
             result.log.summary["final_c_acc"], result.log.summary["final_asr"])
    return summary


def _resolve_bundles(args) -> tuple[tuple[PlanBundle, ...], Path]:
    text = Path(args.config).read_text()
    cfg = parse_config(text)
    bundles = cfg.bundles
    if args.seed is not None:
        bundles = tuple(with_master_seed(b, args.seed) for b in bundles)
    outroot = Path(args.out) if args.out else Path(cfg.outdir)
    return bundles, outroot


def _run_all(bundles, outroot: Path, threads: int) -> list[dict]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: execute_bundle(b, outroot), bundles))
    return [execute_bundle(b, outroot) for b in bundles]


def cmd_run(args) -> int:
    bundles, outroot = _resolve_bundles(args)
    _run_all(bundles, outroot, args.threads)
    print(f"ran {len(bundles)} plan(s) into {outroot}")
    return 0


def _aggregate(values: list[float]) -> dict:
    arr = np.array([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return {"mean": None, "std": None, "values": []}
    return {"mean": float(arr.mean()), "std": float(arr.std()),
            "values": [float(v) for v in arr]}


def cmd_sweep(args) -> int:
    bundles, outroot = _resolve_bundles(args)
    summaries = _run_all(bundles, outroot, args.threads)
    groups: dict[str, dict] = {}
    for bundle, summary in zip(bundles, summaries):
        key = group_key(bundle)
        entry = groups.setdefault(key, {"group": key, "runs": [], "seeds": [],
                                        "c_acc": [], "asr": []})
        entry["runs"].append(bundle.run_id)
        entry["seeds"].append(bundle.plan.master_seed)
        entry["c_acc"].append(summary["summary"]["final_c_acc"])
        entry["asr"].append(summary["summary"]["final_asr"])
    report = []
    for key in sorted(groups):
        entry = groups[key]
        report.append({
            "group": key,
            "runs": entry["runs"],
            "seeds": entry["seeds"],
            "c_acc": _aggregate(entry["c_acc"]),
            "asr": _aggregate(entry["asr"]),
        })
    outroot.mkdir(parents=True, exist_ok=True)
    (outroot / "sweep_summary.json").write_text(
        json.dumps({"groups": report}, indent=2, sort_keys=True) + "\n")
    print(f"swept {len(bundles)} plan(s), {len(report)} group(s) -> "
          f"{outroot / 'sweep_summary.json'}")
    return 0


def cmd_plot(args) -> int:
    series = []
    for path in args.inputs:
        p = Path(path)
        csv_path = p / "metrics.csv" if p.is_dir() else p
        label = p.name if p.is_dir() else p.parent.name or p.stem
        series.extend(_plot_log_csv(csv_path.read_text(), label))
    out = Path(args.out)
    out.write_text(render_curves(series, title="ASR (solid) / C-Acc (dashed)"))
    print(f"wrote {out} with {len(series)} series")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite()
    failed = 0
    for check in results:
        status = "PASS" if check.passed else "FAIL"
        detail = f" ({check.detail})" if check.detail else ""
        print(f"[{status}] {check.name}{detail}")
        failed += 0 if check.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def main(argv=None) -> int:
    level = os.environ.get("FEDSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning backdoor simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("run", cmd_run), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} experiment plans from a config")
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed of every plan")
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker pool size for independent plans")
        p.set_defaults(fn=fn)

    p = sub.add_parser("plot", help="render metrics.csv files to SVG curves")
    p.add_argument("inputs", nargs="+", help="metrics.csv files or run directories")
    p.add_argument("--out", default="curves.svg")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("verify", help="run the built-in oracle/invariant suite")
    p.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FedsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
