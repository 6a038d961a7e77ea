"""Command-line front end: ``glmmlasso fit | simulate | compare``.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence (results
are still written), 3 internal error.
"""
import argparse
import os
import sys

import numpy as np

from . import __version__
from .errors import ConvergenceError, GLMMLassoError, InvalidInputError, NumericalError
from .io import (MODEL_KEYS, FIT_SCHEMA, build_problem, load_epilepsy, parse_bool, parse_model_spec,
                 problem_summary, read_csv, read_kv, record_to_dict, write_json)
from .model import beta_to_original_scale, intercept_column, parse_structure_name, summarize_theta
from .optimizer import OptimizerConfig, fit, init_start
from .problem import GLMMProblem
from .selection import compare_exact_approx, fit_path, select_hybrid, select_thresholded
from . import simulate as sim

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_INTERNAL = 0, 1, 2, 3
REL_LL_BOUND = 5e-3

# config-file keys per command (flags use the same names with dashes)
RUN_KEYS = {
    "fit": {"data", "spec", "family", "lambda", "path", "two_stage", "mode", "seed", "out", "standardize",
            "epilepsy", "workers"},
    "simulate": {"design", "spec", "replicates", "seed", "workers", "out", "scale", "methods", "mode"},
    "compare": {"design", "data", "spec", "family", "replicates", "seed", "workers", "out", "self_check",
                "standardize"},
}
DESIGN_KEYS = {"family", "n_groups", "group_size", "p", "beta0", "re_var", "re_columns", "rho_x", "corr_re",
               "structure", "name"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInputError(f"{self.prog}: {message}")


def _parser():
    p = _Parser(prog="glmmlasso", description="l1-penalized GLMM fitting and simulation studies")
    p.add_argument("--version", action="version", version=f"glmmlasso {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit one lambda, a lambda path or a two-stage estimator")
    f.add_argument("--data", help="CSV file with a header row")
    f.add_argument("--spec", help="model spec file (key = value)")
    f.add_argument("--config", help="run configuration file; flags override its values")
    f.add_argument("--family", help="bernoulli, poisson or gaussian (overrides the model spec)")
    g = f.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lambda_", type=float, metavar="LAMBDA", help="single penalty value")
    g.add_argument("--path", action="store_const", const=True, default=None, help="21-value lambda path")
    g.add_argument("--two-stage", choices=("hybrid", "thresholded"), help="two-stage estimator")
    f.add_argument("--mode", choices=("exact", "approx", "approximate"))
    f.add_argument("--seed", type=int)
    f.add_argument("--workers", type=int)
    f.add_argument("--out", help="output directory (default: current directory)")
    f.add_argument("--epilepsy", action="store_const", const=True, default=None,
                   help="read --data with the epilepsy column contract (no --spec needed)")
    f.add_argument("--no-standardize", dest="standardize", action="store_const", const=False, default=None,
                   help="fit on the raw covariate scale")

    s = sub.add_parser("simulate", help="replicated simulation study of a named or custom design")
    s.add_argument("design", nargs="?", help=f"one of {', '.join(sim.DESIGN_NAMES)} or custom")
    s.add_argument("--spec", help="design file for the custom design")
    s.add_argument("--config")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out")
    s.add_argument("--methods", help=f"comma-separated subset of {', '.join(sim.METHODS)}")
    s.add_argument("--mode", choices=("exact", "approx", "approximate"))
    sc = s.add_mutually_exclusive_group()
    sc.add_argument("--desk", dest="scale", action="store_const", const="desk", help="reduced p (default)")
    sc.add_argument("--full", dest="scale", action="store_const", const="full", help="published p and 100 runs")

    c = sub.add_parser("compare", help="exact versus approximate algorithm metrics")
    c.add_argument("design", nargs="?", help="named design (or use --data/--spec)")
    c.add_argument("--data")
    c.add_argument("--spec")
    c.add_argument("--config")
    c.add_argument("--family")
    c.add_argument("--replicates", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=int)
    c.add_argument("--out")
    c.add_argument("--self-check", dest="self_check", action="store_const", const=True, default=None,
                   help="compare the exact algorithm with itself (all metrics must vanish)")
    c.add_argument("--no-standardize", dest="standardize", action="store_const", const=False, default=None)
    return p


# ---------------------------------------------------------------------------
# settings: config file < flags
# ---------------------------------------------------------------------------

def _settings(args):
    """Merge the config file with the flags; returns (run settings, model entries)."""
    own = RUN_KEYS[args.command] | (DESIGN_KEYS if args.command == "simulate" else set())
    file_vals = read_kv(args.config, own | set(MODEL_KEYS)) if getattr(args, "config", None) else {}
    model = {k: v for k, v in file_vals.items() if k not in own}
    run = {k: v for k, v in file_vals.items() if k not in model}
    flags = vars(args).copy()
    if "lambda_" in flags:
        flags["lambda"] = flags.pop("lambda_")
    for k, v in flags.items():
        if k in ("command", "config") or v is None:
            continue
        run[k] = v
    return run, model


def _get(run, key, conv=str, default=None):
    if key not in run or run[key] is None:
        return default
    v = run[key]
    try:
        if conv is bool:
            return v if isinstance(v, bool) else parse_bool(v, key)
        return conv(v)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{key}: invalid value {v!r}") from exc


def _config(run):
    mode = _get(run, "mode", str, "approximate")
    return OptimizerConfig(mode="approximate" if mode in ("approx", "approximate") else mode)


def _workers(run):
    w = _get(run, "workers", int)
    if w is None:
        w = int(os.environ.get("GLMMLASSO_WORKERS", "0") or 0) or (os.cpu_count() or 1)
    if w < 1:
        raise InvalidInputError("workers must be at least 1")
    return w


def _out_dir(run):
    out = _get(run, "out", str, ".")
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_problem(run, model):
    data = _get(run, "data")
    if not data:
        raise InvalidInputError("--data is required")
    if _get(run, "epilepsy", bool, False):
        problem, _ = load_epilepsy(data)
    else:
        entries = dict(model)
        if _get(run, "spec"):
            spec_entries = read_kv(run["spec"], set(MODEL_KEYS))
            dup = set(spec_entries) & set(entries)
            if dup:
                raise InvalidInputError(f"keys {sorted(dup)} given in both the model spec and the config file")
            entries.update(spec_entries)
        if _get(run, "family"):
            entries["family"] = run["family"]
        if not entries:
            raise InvalidInputError("--spec (or model keys in --config) is required")
        problem = build_problem(read_csv(data), parse_model_spec(entries))
    if _get(run, "family") and _get(run, "epilepsy", bool, False):
        raise InvalidInputError("--family cannot be combined with --epilepsy")
    std = None
    if _get(run, "standardize", bool, True):
        ds, center, scale = problem.dataset.standardize()
        problem = GLMMProblem(ds, problem.template, problem.family, problem.penalty_mask)
        std = (center, scale)
    return problem, std


def _fit_entry(record, problem, std):
    entry = record_to_dict(record, problem)
    if std is not None:
        raw = beta_to_original_scale(record.beta, std[0], std[1], intercept_column(problem.X))
        entry["beta_original_scale"] = [float(v) for v in raw]
    entry["variance_components"] = summarize_theta(record.theta, problem.template)
    return entry


def _fit_table(problem, entries, title):
    names = problem.dataset.column_names
    lines = [title]
    for label, e in entries:
        lines.append(f"[{label}] lambda={e['lambda']:.6g} Q_LA={e['q_la']:.6f} df={e['df']} "
                     f"BIC={e['bic']:.4f} AIC={e['aic']:.4f} converged={e['converged']} kkt_ok={e['kkt_ok']}")
        for nz in e["beta_nonzero"]:
            lines.append(f"    {names[nz['index']]:<20s} {nz['value']: .6f}")
        for k, v in e["variance_components"].items():
            lines.append(f"    {k:<20s} {v: .6f}")
        if problem.family.name == "gaussian" and not problem.family.dispersion_known:
            lines.append(f"    {'phi':<20s} {e['phi']: .6f}")
    return "\n".join(lines) + "\n"


def cmd_fit(run, model):
    problem, std = _load_problem(run, model)
    cfg = _config(run)
    two = _get(run, "two_stage")
    lam = _get(run, "lambda", float)
    out = {"schema": FIT_SCHEMA, "problem": problem_summary(problem),
           "standardized": std is not None}
    if std is not None:
        out["standardization"] = {"center": [float(v) for v in std[0]], "scale": [float(v) for v in std[1]]}
    if two is not None or _get(run, "path", bool, False):
        path = fit_path(problem, config=cfg)
        entries = [_fit_entry(r, problem, std) for r in path.records]
        out["kind"] = "path"
        out["fits"] = entries
        out["bic_best"] = path.bic_best
        out["aic_best"] = path.aic_best
        labels = [(f"{i}{' BIC' if i == path.bic_best else ''}{' AIC' if i == path.aic_best else ''}", e)
                  for i, e in enumerate(entries)]
        converged = all(r.converged for r in path.records)
        if two is not None:
            res = select_hybrid(path, problem, cfg) if two == "hybrid" else select_thresholded(path, problem, cfg)
            out["kind"] = two
            out["stage1"] = _fit_entry(res.stage1, problem, std)
            out["stage2"] = _fit_entry(res.stage2, problem, std)
            out["selected_set"] = [int(k) for k in res.selected_set]
            out["selected_names"] = [problem.dataset.column_names[k] for k in res.selected_set]
            if two == "thresholded":
                out["lambda_thres"] = float(res.lambda_thres)
            labels = [("stage1", out["stage1"]), ("stage2", out["stage2"])]
            converged = converged and res.stage2.converged
    else:
        if lam is None:
            raise InvalidInputError("one of --lambda, --path or --two-stage is required")
        if lam < 0:
            raise InvalidInputError("lambda must be nonnegative")
        rec = fit(problem, lam, cfg, start=init_start(problem, cfg, seed=_get(run, "seed", int, 0)))
        out["kind"] = "single"
        out["fits"] = [_fit_entry(rec, problem, std)]
        labels = [("fit", out["fits"][0])]
        converged = rec.converged
    out["converged"] = bool(converged)
    d = _out_dir(run)
    write_json(os.path.join(d, "fit.json"), out)
    _write(os.path.join(d, "fit.txt"), _fit_table(problem, labels, f"glmmlasso fit ({out['kind']})"))
    return EXIT_OK if converged else EXIT_NONCONVERGED


# ---------------------------------------------------------------------------
# simulate / compare
# ---------------------------------------------------------------------------

def _floats_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def custom_design(entries):
    missing = {"family", "n_groups", "group_size", "p", "beta0"} - set(entries)
    if missing:
        raise InvalidInputError(f"custom design lacks {sorted(missing)}")
    re_var = tuple(_floats_list(entries.get("re_var", "1")))
    re_cols = tuple(int(v) for v in _floats_list(entries.get("re_columns", "0")))
    corr = float(entries["corr_re"]) if "corr_re" in entries else None
    structure = entries.get("structure", "unstructured_lower" if corr is not None else "diagonal")
    return sim.SimDesign(entries.get("name", "custom"), entries["family"].strip(), int(entries["n_groups"]),
                         int(entries["group_size"]), int(entries["p"]), _floats_list(entries["beta0"]),
                         re_var=re_var, re_columns=re_cols, rho_x=float(entries.get("rho_x", 0.2)),
                         corr_re=corr, structure=parse_structure_name(structure))


def _design(run):
    name = _get(run, "design")
    if not name:
        raise InvalidInputError(f"a design name is required; valid: {', '.join(sim.DESIGN_NAMES)}, custom")
    if name == "custom":
        entries = {k: v for k, v in run.items() if k in DESIGN_KEYS}
        if _get(run, "spec"):
            entries.update(read_kv(run["spec"], DESIGN_KEYS))
        return custom_design(entries)
    return sim.design(name, desk=_get(run, "scale", str, "desk") != "full")


def cmd_simulate(run, model):
    if model:
        raise InvalidInputError(f"model keys {sorted(model)} do not apply to simulate")
    d = _design(run)
    seed = _get(run, "seed", int, 0)
    full = _get(run, "scale", str, "desk") == "full"
    reps = _get(run, "replicates", int, sim.FULL_REPLICATES if full else sim.DESK_REPLICATES)
    if reps < 1:
        raise InvalidInputError("replicates must be at least 1")
    cfg = _config(run)
    out = _out_dir(run)
    if d.name == "growing_p":
        res = sim.growing_p(n_replicates=reps, seed=seed, workers=_workers(run), config=cfg)
    else:
        methods = _get(run, "methods", str, "oracle,glmmlasso,hybrid")
        methods = tuple(m.strip() for m in methods.split(",") if m.strip())
        res = sim.run_study(d, methods, reps, seed=seed, workers=_workers(run), config=cfg)
    _write(os.path.join(out, f"{d.name}.csv"), res.to_csv())
    _write(os.path.join(out, f"{d.name}.txt"), res.to_text())
    sys.stdout.write(res.to_text())
    return EXIT_OK


def cmd_compare(run, model):
    self_check = _get(run, "self_check", bool, False)
    out = _out_dir(run)
    if _get(run, "design"):
        if model:
            raise InvalidInputError(f"model keys {sorted(model)} do not apply to a named design")
        d = _design(run)
        res = sim.compare_study(d, _get(run, "replicates", int, 10), seed=_get(run, "seed", int, 0),
                                workers=_workers(run), self_check=self_check)
    else:
        problem, _std = _load_problem(run, model)
        if self_check:
            cfg = OptimizerConfig(mode="exact")
            one = compare_exact_approx(problem, config=cfg, mode_a="exact", mode_e="exact")
        else:
            one = compare_exact_approx(problem, config=OptimizerConfig())
        res = sim.CompareResult("data", [one])
    _write(os.path.join(out, f"compare_{res.name}.csv"), res.to_csv())
    _write(os.path.join(out, f"compare_{res.name}.txt"), res.to_text())
    _write(os.path.join(out, f"compare_{res.name}_timing.txt"), res.timing_text())
    sys.stdout.write(res.to_text())
    rel_ll = res.mean("rel_ll")
    if not np.isfinite(rel_ll) or rel_ll > REL_LL_BOUND:
        sys.stderr.write(f"mean rel_ll {rel_ll:.3g} exceeds {REL_LL_BOUND}\n")
        return EXIT_NONCONVERGED
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
        run, model = _settings(args)
        return COMMANDS[args.command](run, model)
    except InvalidInputError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except (ConvergenceError, NumericalError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NONCONVERGED
    except GLMMLassoError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        sys.stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
