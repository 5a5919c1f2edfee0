"""Command line entry point: ``run``, ``compare`` and ``bounds``.

Outputs of ``run`` are staged in a temporary sibling directory and moved
into place only when every seed and scenario has finished, so a failed run
never leaves partial files behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import __version__, nn
from . import config as cfgmod
from .data import DataError
from .fedsim import ClientUpdateError, simulate
from .metagrad import BatchPlan, NonFiniteError, meta_loss
from .theory import bound_report, constants_dict, estimate_constants

log = logging.getLogger("gmetafl")

METRICS_HEADER = ["seed", "engine", "round", "eval_nu", "mean_accuracy", "wall_ms"]


class CLIError(RuntimeError):
    pass


# -- run ---------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def run_config(cfg: dict, workers: int = 1):
    """Run every seed x scenario; returns (metrics rows, timing rows)."""
    rows, timings = [], []
    record_wall = cfg["output"]["record_wall_time"]
    for seed in cfg["seeds"]:
        clients, n_features, classes = cfgmod.dataset_config(cfg, seed).build(cfg["federation"]["n_clients"])
        spec = cfgmod.model_spec(cfg, n_features, classes)
        for sc in cfgmod.scenarios(cfg, seed, workers):
            log.info("seed %d scenario %s", seed, sc.label)
            records, _ = simulate(sc.fed, spec, clients)
            for rec in records:
                ms = rec.wall_ms
                timings.append([seed, sc.label, rec.round, f"{ms:.1f}"])
                for nu in sc.eval_nus:
                    rows.append([seed, sc.label, rec.round, nu, _fmt(rec.accuracy_by_eval_nu[nu]),
                                 f"{ms:.1f}" if record_wall else ""])
    return rows, timings


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def manifest(cfg: dict) -> dict:
    return {"code_version": __version__, "numpy_version": np.__version__, "config": cfg}


def cmd_run(args) -> int:
    cfg = cfgmod.load(args.config)
    out = Path(args.out or cfg["output"]["directory"])
    cfg["output"]["directory"] = str(out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError(f"output directory {out} already exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        rows, timings = run_config(cfg, args.workers)
        (stage / "metrics.csv").write_text(_csv_text(METRICS_HEADER, rows))
        (stage / "timings.csv").write_text(_csv_text(["seed", "engine", "round", "wall_ms"], timings))
        if cfg["theory"]["enabled"]:
            (stage / "bounds.json").write_text(json.dumps(report_bounds(cfg), indent=2) + "\n")
        (stage / "manifest.json").write_text(json.dumps(manifest(cfg), indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        stage.rename(out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    print(f"wrote {out / 'metrics.csv'} ({len(rows)} rows)")
    return 0


# -- compare -----------------------------------------------------------------

def read_metrics(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"metrics file not found: {p}")
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise CLIError(f"{p}: unexpected header {reader.fieldnames}")
        return [
            {"seed": int(r["seed"]), "engine": r["engine"], "round": int(r["round"]),
             "eval_nu": int(r["eval_nu"]), "mean_accuracy": float(r["mean_accuracy"])}
            for r in reader
        ]


def summarize(paths, target: float | None = None, pool: bool = False) -> list[dict]:
    """Final-round accuracy across seeds per (source, engine label, eval_nu).

    ``first_round_above`` is the first round at which the seed-mean curve
    reaches ``target`` (None when it never does). With ``pool`` the files
    are merged into a single source. Rows are sorted by final mean,
    highest first.
    """
    groups: dict[tuple, dict[int, dict[int, float]]] = {}
    ks = {}
    for i, path in enumerate(paths):
        src = (0, "*") if pool else (i, str(path))
        rows = read_metrics(path)
        if not rows:
            raise CLIError(f"{path}: no metrics rows")
        ks[i, str(path)] = max(r["round"] for r in rows)
        for r in rows:
            curves = groups.setdefault((src, r["engine"], r["eval_nu"]), {})
            curves.setdefault(r["seed"], {})[r["round"]] = r["mean_accuracy"]
    if len(set(ks.values())) > 1:
        detail = ", ".join(f"{p}: K={k}" for (_, p), k in ks.items())
        raise CLIError(f"metrics files disagree on the number of rounds ({detail})")
    K = next(iter(ks.values()))
    table = []
    for ((_, src), label, ev), curves in groups.items():
        for seed, c in curves.items():
            if sorted(c) != list(range(K + 1)):
                raise CLIError(f"{src}: seed {seed} {label} eval_nu={ev} rounds are not 0..{K}")
        mat = np.array([[c[k] for k in range(K + 1)] for _, c in sorted(curves.items())])
        final = mat[:, -1]
        mean_curve = mat.mean(axis=0)
        first = None
        if target is not None:
            hit = np.nonzero(mean_curve >= target)[0]
            first = int(hit[0]) if hit.size else None
        table.append({
            "source": src, "engine": label, "eval_nu": ev, "seeds": len(final),
            "final_mean": float(final.mean()),
            "final_std": float(final.std(ddof=1)) if len(final) > 1 else 0.0,
            "first_round_above": first,
        })
    table.sort(key=lambda r: (-r["final_mean"], r["source"], r["engine"], r["eval_nu"]))
    return table


def format_table(table, target=None) -> str:
    head = ["source", "engine", "eval_nu", "seeds", "final accuracy"]
    if target is not None:
        head.append(f"first round >= {target:g}")
    lines = [head]
    for r in table:
        line = [r["source"], r["engine"], str(r["eval_nu"]), str(r["seeds"]),
                f"{r['final_mean']:.4f} +/- {r['final_std']:.4f}"]
        if target is not None:
            line.append("never" if r["first_round_above"] is None else str(r["first_round_above"]))
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(l, widths)).rstrip() for l in lines)


def cmd_compare(args) -> int:
    table = summarize(args.files, args.target, args.pool)
    print(format_table(table, args.target))
    return 0


# -- bounds ------------------------------------------------------------------

def report_bounds(cfg: dict, seed: int | None = None) -> dict:
    """Estimate constants at the initial model and evaluate the bounds.

    The configured setting is reported in full, followed by a sweep over
    ``theory.nu_sweep``. The optimality gap uses ``max_nu mean_i F_i(w0)``
    as an upper bound on ``F(w0) - F*`` (cross-entropy is non-negative),
    shared by every row so the sweep stays comparable.
    """
    seed = cfg["seeds"][0] if seed is None else seed
    fed, th, eng = cfg["federation"], cfg["theory"], cfg["engine"]
    clients, n_features, classes = cfgmod.dataset_config(cfg, seed).build(fed["n_clients"])
    spec = cfgmod.model_spec(cfg, n_features, classes)
    w0 = nn.init_params(spec, seed).values
    probe_clients = clients[: th["max_clients"]]
    c = estimate_constants(spec, probe_clients, th["probe_count"], seed, center=w0, radius=th["radius"])
    nus = sorted(set(th["nu_sweep"]) | {fed["nu"]} - {0})
    F0 = max(float(np.mean([meta_loss(spec, w0, cl, fed["alpha"], nu) for cl in clients])) for nu in nus)

    def one(nu):
        plan = BatchPlan.uniform(nu, fed["batch_size"], fed["hessian_batch_size"])
        return bound_report(c, fed["alpha"], fed["beta"], nu, fed["tau"], max(fed["rounds"], 1),
                            fed["participation"], fed["n_clients"], plan, eng["mode"], eng["delta"],
                            F0, th["big_O_const"])

    sweep = []
    for nu in th["nu_sweep"]:
        rep = one(nu)
        sweep.append({"nu": nu, "L_F": rep.L_F, "mu_F": rep.mu_F, "sigma_F_sq": rep.sigma_F_sq,
                      "gamma_F_sq": rep.gamma_F_sq, "theorem_rhs": rep.theorem_rhs,
                      "beta_hypothesis_ok": rep.beta_ok})
    configured = one(fed["nu"]).labeled() if fed["nu"] >= 1 else None
    violated = [row["nu"] for row in sweep if not row["beta_hypothesis_ok"]]
    if configured is not None and not configured["stationarity_theorem"]["beta_hypothesis_ok"]:
        violated = sorted(set(violated) | {fed["nu"]})
    return {
        "code_version": __version__,
        "seed": seed,
        "engine": eng["mode"],
        "constants": constants_dict(c),
        "F0_minus_Fstar_upper": F0,
        "hyperparameters": {"alpha": fed["alpha"], "beta": fed["beta"], "tau": fed["tau"],
                            "K": fed["rounds"], "r": fed["participation"], "n": fed["n_clients"],
                            "delta": eng["delta"]},
        "configured": configured,
        "nu_sweep": sweep,
        "beta_hypothesis_violated": bool(violated),
        "beta_hypothesis_violated_at_nu": violated,
    }


def cmd_bounds(args) -> int:
    cfg = cfgmod.load(args.config)
    rep = report_bounds(cfg)
    text = json.dumps(rep, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    if rep["beta_hypothesis_violated"]:
        print(f"warning: beta exceeds 1/(10 tau L_F) at nu={rep['beta_hypothesis_violated_at_nu']}",
              file=sys.stderr)
    return 0


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmetafl", description="Meta federated learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (file, manifest or preset name)")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: output.directory from the config)")
    r.add_argument("--workers", type=int, default=1, help="threads for client updates within a round")
    r.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="summarize metrics.csv files")
    c.add_argument("files", nargs="+")
    c.add_argument("--target", type=float, help="accuracy threshold for the convergence column")
    c.add_argument("--pool", action="store_true", help="merge all files into one source")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bounds", help="estimate constants and evaluate the convergence bounds")
    b.add_argument("config")
    b.add_argument("--out", help="write bounds.json here instead of standard output")
    b.set_defaults(func=cmd_bounds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except (cfgmod.ConfigError, CLIError, DataError, ClientUpdateError, NonFiniteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
