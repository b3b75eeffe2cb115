"""``elaskit`` command line: ``run`` a preset through a trace, or ``verify`` consistency."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .consistency import MUTATIONS, ToyConfig, run_toy
from .errors import ConfigError, ElasKitError
from .partition import brute_force_partition, per_layer_cost, plan_partition
from .policies import Policy
from .runner import RunConfig, SimReport, make_cluster, node_failure_trace, recovery_throughput, run
from .trace import load_config, load_trace, resolve_preset

EXIT_OK, EXIT_CONFIG, EXIT_OOM, EXIT_VERIFY = 0, 1, 2, 3
SUMMARY_COLUMNS = ("step", "time_s", "samples_per_s", "active_devices", "lse_cum")
MTTR_COLUMNS = ("event_index", "time_s", "kind", "policy", "detect_s", "comm_repair_s", "remap_s",
                "migration_stall_s", "other_s", "total_s", "layer_moves")

log = logging.getLogger("elaskit")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="elaskit", description="Elastic training recovery simulator.")
    ap.add_argument("command", nargs="?", choices=("run", "verify"), default="run")
    ap.add_argument("--preset", help="llama2-7b, llama2-13b or llama2-34b")
    ap.add_argument("--config", help="JSON file with the same keys as the flags")
    ap.add_argument("--trace", help="JSON-lines event trace; omitted means a 1-node fail-stop")
    ap.add_argument("--policy", choices=[p.value for p in Policy] + ["all"])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory (default: elaskit-out)")
    ap.add_argument("--scale-factor", type=float, help="fraction of micro-batches per step to simulate")
    ap.add_argument("--verify", action="store_true", help="same as the verify command")
    ap.add_argument("--inject", choices=MUTATIONS, help=argparse.SUPPRESS)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("ELASKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def write_outputs(report: SimReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in report.steps:
            w.writerow([s.step, repr(s.time_s), repr(s.samples_per_s), s.active_devices, repr(s.lse_cum)])
    with (out / "mttr.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MTTR_COLUMNS)
        for r in report.recoveries:
            d = r.as_dict()
            w.writerow([d[c] for c in MTTR_COLUMNS])


def _summary_line(r: SimReport) -> str:
    status = f"OOM ({r.oom})" if r.oom else "ok"
    return (f"{r.policy}: {len(r.steps)} steps, {r.initial_throughput:.3f} -> {r.final_throughput:.3f} samples/s, "
            f"LSE {r.to_dict()['lse']:.3f}, pause {sum(x.total_s for x in r.recoveries):.3f}s, {status}")


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    name = args.preset or cfg.get("preset")
    if not name:
        raise ConfigError("a preset is required (--preset or config 'preset')")
    scale = args.scale_factor if args.scale_factor is not None else cfg.get("scale_factor", 1.0)
    preset = resolve_preset(name, scale, cfg.get("overrides"))
    policy = args.policy or cfg.get("policy", "elaswave")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = Path(args.out or cfg.get("out", "elaskit-out"))
    cluster = make_cluster(preset)
    trace_path = args.trace or cfg.get("trace")
    if trace_path:
        trace = load_trace(trace_path, cluster)
    else:
        # first step finishes before the default failure lands
        trace = node_failure_trace(preset)

    policies = list(Policy) if policy == "all" else [Policy(policy)]
    reports = []
    for pol in policies:
        report = run(RunConfig(preset, pol, seed), trace)
        write_outputs(report, out / pol.value if len(policies) > 1 else out)
        print(_summary_line(report))
        reports.append(report)
    if len(reports) > 1:
        _write_comparison(reports, out)
    return EXIT_OOM if any(r.oom for r in reports) else EXIT_OK


def _write_comparison(reports: Sequence[SimReport], out: Path) -> None:
    window = {r.policy: recovery_throughput(r) for r in reports}
    rows = sorted(reports, key=lambda r: -window[r.policy])
    with (out / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("policy", "recovery_samples_per_s", "final_samples_per_s", "lse", "pause_s", "oom"))
        for r in rows:
            w.writerow((r.policy, repr(window[r.policy]), repr(r.final_throughput), repr(r.to_dict()["lse"]),
                        repr(sum(x.total_s for x in r.recoveries)), r.oom or ""))
    print("ranking: " + " > ".join(r.policy for r in rows))


def _partition_spot_checks(seed: int, count: int = 100) -> Optional[dict]:
    rng = random.Random(seed)
    for i in range(count):
        L = rng.randint(1, 10)
        P = rng.randint(1, min(L, 4))
        times = [rng.randint(1, 9) / 4 for _ in range(L)]
        time_fn, _ = per_layer_cost(times)
        got = plan_partition(L, P, [1.0] * P, time_fn)
        want = brute_force_partition(L, P, [1.0] * P, time_fn)
        if got.boundaries != want.boundaries or got.objective != want.objective:
            return {"instance": i, "times": times, "P": P, "planner": list(got.boundaries),
                    "oracle": list(want.boundaries)}
    return None


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    toy = ToyConfig(seed=1234 + seed)
    ref = run_toy(toy)
    got = run_toy(toy, elastic=True, mutation=args.inject)
    failures = {}

    diff = next((k for k in sorted(ref.transcript) if got.transcript.get(k) != ref.transcript[k]), None)
    if diff is not None:
        failures["rng_transcript_equal"] = {"step": diff[0], "sample": diff[1], "layer": diff[2],
                                            "static": ref.transcript[diff], "elastic": got.transcript.get(diff)}
    layer = next((i for i, (a, b) in enumerate(zip(ref.params, got.params)) if a != b), None)
    if layer is not None:
        failures["gradient_equal"] = {"layer": layer, "static": [str(x) for x in ref.params[layer]],
                                      "elastic": [str(x) for x in got.params[layer]]}
    if not got.coverage_ok:
        failures["gradient_coverage"] = {"detail": "a micro-batch was counted zero or two times"}
    bad = _partition_spot_checks(seed)
    if bad is not None:
        failures["partition_oracle"] = bad

    for name in ("rng_transcript_equal", "gradient_equal", "gradient_coverage", "partition_oracle"):
        print(f"{'FAIL' if name in failures else 'PASS'} {name}")
    if failures:
        print(json.dumps(failures, sort_keys=True, indent=1), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.verify or args.command == "verify":
            return cmd_verify(args)
        return cmd_run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ElasKitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
