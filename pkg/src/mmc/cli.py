"""Command-line interface.

Subcommands: ``synth``, ``complete``, ``effective-rank``, ``fitlink`` and
``split``.  Each writes into ``--out`` (default: ``$MMC_OUTPUT_ROOT`` or the
current directory).  Every option can also come from a JSON object given with
``--config``; its keys are the option names with dashes replaced by
underscores.  Explicit flags beat the config file, which beats the built-in
defaults.

Errors print one JSON record ``{"error": ..., "type": ..., ...}`` to stderr,
also saved as ``error.json`` when the output directory is writable, and the
process exits nonzero:

=====  ===========================================
code   meaning
=====  ===========================================
0      success
2      invalid input or configuration
3      a solver did not converge
4      the iteration diverged
1      anything else (I/O errors included)
=====  ===========================================
"""

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as D
from .engine import (MmcConfig, RankSchedule, lrmc_baseline, mmc_calibrated, mmc_least_squares,
                     mmc_one_step, run_rank_schedule, synthetic_protocol_config)
from .errors import ConvergenceError, DivergenceError, MmcError, ValidationError
from .linalg import effective_rank
from .lpav import LpavProblem, lpav_solve
from .observations import ObservationSet, rmse_on

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "MMC_OUTPUT_ROOT"
ALGORITHMS = ("mmc-c", "mmc-ls", "mmc-1", "lrmc-baseline")

_SYNTH_DEFAULTS = dict(n=30, m=20, r=5, c=1.0, p=0.5, noise_sd=0.0, bounded=False, seed=0)

DEFAULTS = {
    "synth": dict(_SYNTH_DEFAULTS),
    "complete": dict(
        _SYNTH_DEFAULTS, algorithm="mmc-c", train=None, test=None, val=None, dense=None, one_indexed=False,
        preset="none", rank=5, rank_schedule=None, eta=None, lipschitz=1.0, t_max=50,
        threshold=1e-3, gamma=1.0, eps_abs=1e-2, eps_rel=1e-2, lpav_max_iters=5000,
        seeds=None, repeat=1, jobs=1, dataset=None),
    "effective-rank": dict(matrix=None, eps=0.01, c_values="1,2,5,10,20", link="logistic"),
    "fitlink": dict(z=None, x=None, lipschitz=1.0, gamma=1.0, eps_abs=1e-2, eps_rel=1e-2,
                    max_iters=5000, no_polish=False),
    "split": dict(input=None, one_indexed=False, train_frac=0.2, val_frac=0.2, per_row=None,
                  seed=0),
}

_EXIT = {ValidationError: 2, ConvergenceError: 3, DivergenceError: 4}


# ---------------------------------------------------------------------------
# small output helpers

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_obs(path, obs, source, one_indexed=False):
    D.write_triplets(path, obs, one_indexed=one_indexed)
    D.write_metadata(D.metadata_path(path), obs.n, obs.m, "1" if one_indexed else "0", source)


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma separated numbers, got {text!r}") from None


def _read_vector(path):
    """Numbers from a CSV file, one or many per line, in reading order."""
    return D.read_dense(path).ravel() if _has_many_columns(path) else D.read_dense(path)[:, 0]


def _has_many_columns(path):
    with open(path) as fh:
        for line in fh:
            if line.strip():
                return "," in line
    return False


# ---------------------------------------------------------------------------
# synth

def cmd_synth(opts, out):
    spec = D.SyntheticSpec(opts["n"], opts["m"], opts["r"], opts["c"], opts["p"],
                           opts["noise_sd"], opts["seed"], opts["bounded"])
    ds = D.gen_synthetic(spec)
    source = f"synthetic n={spec.n} m={spec.m} r={spec.r} c={spec.c!r} p={spec.p!r} seed={spec.seed}"
    D.write_dense(os.path.join(out, "z_star.csv"), ds.z_star)
    D.write_dense(os.path.join(out, "m_star.csv"), ds.m_star)
    _write_obs(os.path.join(out, "train.csv"), ds.train, source)
    _write_obs(os.path.join(out, "heldout.csv"), ds.heldout, source)
    return {"train_entries": len(ds.train), "heldout_entries": len(ds.heldout)}


# ---------------------------------------------------------------------------
# complete

def _mmc_config(opts):
    fields = dict(rank=opts["rank"], lipschitz=opts["lipschitz"], t_max=opts["t_max"],
                  train_residual_threshold=opts["threshold"], gamma=opts["gamma"],
                  eps_abs=opts["eps_abs"], eps_rel=opts["eps_rel"],
                  lpav_max_iters=opts["lpav_max_iters"], eta=opts["eta"])
    if opts["rank_schedule"]:
        parts = _float_list(opts["rank_schedule"])
        if len(parts) != 4:
            raise ValidationError("--rank-schedule needs r_min,r_inc,r_max,eps")
        fields["rank_schedule"] = RankSchedule(int(parts[0]), int(parts[1]), int(parts[2]), parts[3])
    if opts["preset"] == "synthetic":
        # preset values apply unless given explicitly
        preset = synthetic_protocol_config()
        for key in ("eta", "lipschitz", "rank_schedule"):
            if key not in opts["_explicit"] and not (key == "rank_schedule" and opts["rank_schedule"]):
                fields[key] = getattr(preset, key)
    elif opts["preset"] != "none":
        raise ValidationError(f"unknown preset {opts['preset']!r}")
    return MmcConfig(**fields)


def _solve(algorithm, train, cfg):
    if algorithm == "mmc-c":
        return run_rank_schedule(train, cfg) if cfg.rank_schedule else mmc_calibrated(train, cfg)
    if algorithm == "mmc-ls":
        return mmc_least_squares(train, cfg)
    if algorithm == "mmc-1":
        return mmc_one_step(train, cfg.rank, cfg.lipschitz, cfg.gamma, cfg.eps_abs, cfg.eps_rel,
                            cfg.lpav_max_iters)
    if algorithm == "lrmc-baseline":
        return lrmc_baseline(train, cfg)
    raise ValidationError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")


def _load_sets(opts, seed):
    """(dataset id, train, val or None, test or None) for one seed."""
    if opts["train"]:
        train = D.parse_triplets(opts["train"], one_indexed=opts["one_indexed"])
        shape = train.shape
        val = D.parse_triplets(opts["val"], opts["one_indexed"], shape) if opts["val"] else None
        test = D.parse_triplets(opts["test"], opts["one_indexed"], shape) if opts["test"] else None
        name = opts["dataset"] or os.path.splitext(os.path.basename(opts["train"]))[0]
        return name, train, val, test
    if opts["dense"]:
        # fully known grid (e.g. an image): observe each cell with probability p
        x = D.read_dense(opts["dense"])
        if not 0 < opts["p"] <= 1:
            raise ValidationError("p must lie in (0, 1]")
        mask = D.rng_for(seed, "mask").random(x.shape) < opts["p"]
        name = opts["dataset"] or os.path.splitext(os.path.basename(opts["dense"]))[0]
        return name, ObservationSet.from_mask(x, mask), None, ObservationSet.from_mask(x, ~mask)
    spec = D.SyntheticSpec(opts["n"], opts["m"], opts["r"], opts["c"], opts["p"],
                           opts["noise_sd"], seed, opts["bounded"])
    ds = D.gen_synthetic(spec)
    name = opts["dataset"] or f"synthetic-n{spec.n}-m{spec.m}-r{spec.r}-c{spec.c!r}-p{spec.p!r}"
    return name, ds.train, None, ds.heldout


def _config_record(cfg):
    rec = {k: getattr(cfg, k) for k in ("eta", "t_max", "rank", "lipschitz",
                                        "train_residual_threshold", "gamma", "eps_abs", "eps_rel",
                                        "lpav_max_iters")}
    sch = cfg.rank_schedule
    rec["rank_schedule"] = None if sch is None else {
        "r_min": sch.r_min, "r_inc": sch.r_inc, "r_max": sch.r_max, "progress_eps": sch.progress_eps}
    return rec


def _rmse_or_none(obs, m_hat):
    return None if obs is None or len(obs) == 0 else rmse_on(obs, m_hat)


def run_cell(algorithm, opts, seed, cell_dir):
    """One (algorithm, seed) run; writes its files and returns the metrics record."""
    cfg = _mmc_config(opts)
    dataset, train, val, test = _load_sets(opts, seed)
    start = time.perf_counter()
    result = _solve(algorithm, train, cfg)
    wall = time.perf_counter() - start
    os.makedirs(cell_dir, exist_ok=True)
    D.write_dense(os.path.join(cell_dir, "m_hat.csv"), result.m_hat)
    _write_csv(os.path.join(cell_dir, "trace.csv"), ["iteration", "train_rmse", "rank"],
               [(r.iteration, r.train_rmse, r.rank) for r in result.trace])
    record = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": algorithm,
        "dataset": dataset,
        "seed": seed,
        "rmse": {"train": rmse_on(train, result.m_hat), "val": _rmse_or_none(val, result.m_hat),
                 "test": _rmse_or_none(test, result.m_hat)},
        "final_rank": int(result.rank),
        "iterations": result.iterations,
        "stopped_early": bool(result.stopped_early),
        "eta": None if np.isnan(result.eta) else float(result.eta),
        "trace": [{"iteration": r.iteration, "train_rmse": r.train_rmse, "rank": r.rank}
                  for r in result.trace],
        "config": _config_record(cfg),
        "wall_time_s": wall,
    }
    _write_json(os.path.join(cell_dir, "metrics.json"), record)
    return record


def _run_cell_args(args):
    return run_cell(*args)


def _summary(records):
    out = {"schema_version": SCHEMA_VERSION, "algorithm": records[0]["algorithm"],
           "dataset": records[0]["dataset"], "seeds": [r["seed"] for r in records], "rmse": {}}
    for part in ("train", "val", "test"):
        vals = [r["rmse"][part] for r in records if r["rmse"][part] is not None]
        if vals:
            out["rmse"][part] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                                 "n": len(vals)}
    out["wall_time_s"] = float(sum(r["wall_time_s"] for r in records))
    return out


def cmd_complete(opts, out):
    if opts["algorithm"] not in ALGORITHMS:
        raise ValidationError(f"unknown algorithm {opts['algorithm']!r}; choose from {', '.join(ALGORITHMS)}")
    if opts["seeds"]:
        seeds = _int_list(opts["seeds"])
    else:
        if opts["repeat"] < 1:
            raise ValidationError("--repeat must be >= 1")
        seeds = [opts["seed"] + k for k in range(opts["repeat"])]
    if not seeds:
        raise ValidationError("no seeds given")
    if opts["jobs"] < 1:
        raise ValidationError("--jobs must be >= 1")
    _mmc_config(opts)  # fail fast on bad configuration
    cells = [(opts["algorithm"], opts, s, os.path.join(out, f"seed{s}") if len(seeds) > 1 else out)
             for s in seeds]
    if opts["jobs"] > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=opts["jobs"]) as pool:
            records = list(pool.map(_run_cell_args, cells))
    else:
        records = [run_cell(*c) for c in cells]
    if len(records) > 1:
        summary = _summary(records)
        _write_json(os.path.join(out, "summary.json"), summary)
        return summary
    return {k: records[0][k] for k in ("algorithm", "dataset", "seed", "rmse", "final_rank", "iterations")}


# ---------------------------------------------------------------------------
# effective-rank

def cmd_effective_rank(opts, out):
    if not opts["matrix"]:
        raise ValidationError("--matrix is required")
    z = D.read_dense(opts["matrix"])
    cs = _float_list(opts["c_values"])
    if not cs:
        raise ValidationError("no c values given")
    if opts["link"] == "logistic":
        rows = [(c, effective_rank(D.logistic(z, c), opts["eps"])) for c in cs]
    elif opts["link"] == "identity":
        rows = [(c, effective_rank(c * z, opts["eps"])) for c in cs]
    else:
        raise ValidationError(f"unknown link {opts['link']!r}")
    ranks = [r for _, r in rows]
    ordered = sorted(rows)
    nondecreasing = all(a[1] <= b[1] for a, b in zip(ordered, ordered[1:]))
    _write_csv(os.path.join(out, "effective_rank.csv"), ["c", "effective_rank"], rows)
    summary = {"schema_version": SCHEMA_VERSION, "eps": opts["eps"], "link": opts["link"],
               "c": cs, "effective_rank": ranks, "nondecreasing_in_c": nondecreasing}
    _write_json(os.path.join(out, "effective_rank.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# fitlink

def cmd_fitlink(opts, out):
    if not opts["z"] or not opts["x"]:
        raise ValidationError("--z and --x are required")
    z, x = _read_vector(opts["z"]), _read_vector(opts["x"])
    problem, order = LpavProblem.from_unsorted(z, x, opts["lipschitz"])
    diag = {"schema_version": SCHEMA_VERSION, "points": int(z.size), "lipschitz": opts["lipschitz"]}
    try:
        sol = lpav_solve(problem, gamma=opts["gamma"], eps_abs=opts["eps_abs"],
                         eps_rel=opts["eps_rel"], max_iters=opts["max_iters"],
                         polish=not opts["no_polish"])
    except ConvergenceError as exc:
        diag.update(converged=False, iterations=exc.iterations, residuals=exc.residuals)
        _write_json(os.path.join(out, "fitlink_diagnostics.json"), diag)
        raise
    _write_csv(os.path.join(out, "fitlink_knots.csv"), ["z", "x", "y"],
               zip(problem.z, problem.x, sol.y))
    d = np.diff(sol.y)
    b = problem.lipschitz * np.diff(problem.z)
    diag.update(converged=True, objective=sol.objective, iterations=sol.iterations,
                residuals={"primal": sol.primal_residual, "dual": sol.dual_residual},
                polished=bool(sol.polished),
                max_violation=float(max(0.0, -d.min(initial=0.0), (d - b).max(initial=0.0))))
    _write_json(os.path.join(out, "fitlink_diagnostics.json"), diag)
    return diag


# ---------------------------------------------------------------------------
# split

def cmd_split(opts, out):
    if not opts["input"]:
        raise ValidationError("--input is required")
    obs = D.parse_triplets(opts["input"], one_indexed=opts["one_indexed"])
    per_row = tuple(_int_list(opts["per_row"])) if opts["per_row"] else None
    if per_row is not None and len(per_row) != 2:
        raise ValidationError("--per-row needs k_train,k_val")
    spec = D.SplitSpec(opts["train_frac"], opts["val_frac"], per_row, opts["seed"])
    parts = D.split(obs, spec)
    source = f"split of {os.path.basename(opts['input'])} seed={spec.seed}"
    counts = {}
    for name, part in zip(("train", "val", "test"), parts):
        _write_obs(os.path.join(out, f"{name}.csv"), part, source, opts["one_indexed"])
        counts[name] = len(part)
    return counts


COMMANDS = {"synth": cmd_synth, "complete": cmd_complete, "effective-rank": cmd_effective_rank,
            "fitlink": cmd_fitlink, "split": cmd_split}


# ---------------------------------------------------------------------------
# argument parsing

def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def _add_synth_flags(p):
    for name, typ in (("n", int), ("m", int), ("r", int), ("c", float), ("p", float),
                      ("noise_sd", float), ("seed", int)):
        _flag(p, name, type=typ)
    _flag(p, "bounded", action="store_true", help="clip noisy observations into [-1, 1]")


def build_parser():
    parser = argparse.ArgumentParser(prog="mmc", description="Monotonic matrix completion toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None,
                        help=f"output directory (default: ${OUTPUT_ROOT_ENV} or the current directory)")
    common.add_argument("--config", default=None, help="JSON file with option defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    _add_synth_flags(p)

    p = sub.add_parser("complete", parents=[common], help="run a completion algorithm")
    _add_synth_flags(p)
    _flag(p, "algorithm", choices=ALGORITHMS)
    _flag(p, "train", help="training triplet file (otherwise data are synthesized)")
    _flag(p, "val", help="validation triplet file")
    _flag(p, "test", help="test triplet file")
    _flag(p, "dense", help="dense CSV matrix to subsample with probability --p")
    _flag(p, "one_indexed", action="store_true")
    _flag(p, "dataset", help="dataset id recorded in the metrics")
    _flag(p, "preset", choices=("none", "synthetic"))
    _flag(p, "rank", type=int)
    _flag(p, "rank_schedule", help="r_min,r_inc,r_max,eps")
    _flag(p, "eta", type=float)
    _flag(p, "lipschitz", type=float)
    _flag(p, "t_max", type=int)
    _flag(p, "threshold", type=float, help="relative training residual stop")
    _flag(p, "gamma", type=float)
    _flag(p, "eps_abs", type=float)
    _flag(p, "eps_rel", type=float)
    _flag(p, "lpav_max_iters", type=int)
    _flag(p, "seeds", help="comma separated seed list")
    _flag(p, "repeat", type=int, help="number of consecutive seeds starting at --seed")
    _flag(p, "jobs", type=int)

    p = sub.add_parser("effective-rank", parents=[common], help="effective rank over a c sweep")
    _flag(p, "matrix", help="dense CSV matrix Z")
    _flag(p, "eps", type=float)
    _flag(p, "c_values", help="comma separated scales")
    _flag(p, "link", choices=("logistic", "identity"))

    p = sub.add_parser("fitlink", parents=[common], help="fit a monotone Lipschitz link")
    _flag(p, "z", help="CSV of covariates")
    _flag(p, "x", help="CSV of targets")
    _flag(p, "lipschitz", type=float)
    _flag(p, "gamma", type=float)
    _flag(p, "eps_abs", type=float)
    _flag(p, "eps_rel", type=float)
    _flag(p, "max_iters", type=int)
    _flag(p, "no_polish", action="store_true")

    p = sub.add_parser("split", parents=[common], help="split a triplet file")
    _flag(p, "input", help="triplet file")
    _flag(p, "one_indexed", action="store_true")
    _flag(p, "train_frac", type=float)
    _flag(p, "val_frac", type=float)
    _flag(p, "per_row", help="k_train,k_val drawn from every row")
    _flag(p, "seed", type=int)
    return parser


def resolve_options(ns):
    """Merge defaults, the config file and explicit flags (in increasing priority)."""
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "out", "config")}
    opts = dict(DEFAULTS[ns.command])
    if ns.config:
        try:
            with open(ns.config) as fh:
                file_opts = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config file {ns.config}: {exc}") from None
        if not isinstance(file_opts, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = sorted(set(file_opts) - set(opts))
        if unknown:
            raise ValidationError(f"unknown config keys for {ns.command}: {unknown}")
        opts.update(file_opts)
        explicit_keys = set(explicit) | set(file_opts)
    else:
        explicit_keys = set(explicit)
    opts.update(explicit)
    opts["_explicit"] = explicit_keys
    return opts


def _error_record(exc):
    rec = {"error": str(exc), "type": type(exc).__name__}
    if isinstance(exc, ConvergenceError):
        rec["iterations"] = exc.iterations
        rec["residuals"] = exc.residuals
    if isinstance(exc, DivergenceError):
        rec["iteration"] = exc.iteration
    return rec


def _exit_code(exc):
    for cls, code in _EXIT.items():
        if isinstance(exc, cls):
            return code
    return 1


def main(argv=None):
    ns = build_parser().parse_args(argv)
    out = ns.out or os.environ.get(OUTPUT_ROOT_ENV) or "."
    stale = os.path.join(out, "error.json")
    if os.path.exists(stale):  # left over from an earlier failed run
        os.remove(stale)
    try:
        opts = resolve_options(ns)
        os.makedirs(out, exist_ok=True)
        summary = COMMANDS[ns.command](opts, out)
    except (MmcError, ValueError, OSError) as exc:
        record = _error_record(exc)
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        try:
            os.makedirs(out, exist_ok=True)
            _write_json(os.path.join(out, "error.json"), record)
        except OSError:
            pass
        return _exit_code(exc)
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
