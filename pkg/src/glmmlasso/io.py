"""File formats: CSV data, the key-value model/config format, fit.json.

Key-value files hold ``key = value`` entries separated by newlines or ``;``
with ``#`` comments.  A model spec uses the keys

    response = y
    groups = subject, obs
    random = intercept + x1 @ subject, intercept @ obs
    family = bernoulli
    covariates = x1, x2, x3          # optional; default: every other column
    unpenalized = x2                 # optional; intercept and RE columns always are
    structure = diagonal             # or e.g. "unstructured @ subject, diagonal @ obs"
    intercept = true

Run-configuration files may contain the same keys plus the command-line
settings (``lambda``, ``mode``, ``seed`` ...); unknown keys are errors.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .family import make_family
from .model import (INTERCEPT, CovarianceTemplate, CovBlock, Dataset, ParamState, default_penalty_mask,
                    parse_structure_name)
from .problem import GLMMProblem

FIT_SCHEMA = "glmmlasso.fit/1"
MODEL_KEYS = ("response", "groups", "random", "family", "covariates", "unpenalized", "structure", "intercept",
              "phi")


# ---------------------------------------------------------------------------
# key-value files
# ---------------------------------------------------------------------------

def parse_kv(text, allowed=None, source="<string>"):
    """Parse ``key = value`` entries; later duplicates are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        for item in line.split(";"):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise InvalidInputError(f"{source}:{lineno}: expected 'key = value', got {item!r}")
            key, value = (s.strip() for s in item.split("=", 1))
            key = key.lower().replace("-", "_")
            if not key:
                raise InvalidInputError(f"{source}:{lineno}: empty key")
            if allowed is not None and key not in allowed:
                raise InvalidInputError(f"{source}:{lineno}: unknown key {key!r}; valid keys: "
                                        f"{', '.join(sorted(allowed))}")
            if key in out:
                raise InvalidInputError(f"{source}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def read_kv(path, allowed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    return parse_kv(text, allowed, str(path))


def parse_bool(value, key="value"):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidInputError(f"{key}: expected a boolean, got {value!r}")


def _names(value):
    return [s.strip() for s in str(value).split(",") if s.strip()]


# ---------------------------------------------------------------------------
# model spec
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    response: str
    groups: list
    random: list            # [(factor name, [variable names])]
    family: str = "bernoulli"
    covariates: list = None
    unpenalized: list = field(default_factory=list)
    structure: dict = field(default_factory=dict)   # factor name -> structure
    default_structure: str = "diagonal"
    intercept: bool = True
    phi: float = None


def parse_model_spec(entries):
    """Build a :class:`ModelSpec` from parsed key-value entries."""
    unknown = set(entries) - set(MODEL_KEYS)
    if unknown:
        raise InvalidInputError(f"unknown model keys {sorted(unknown)}")
    for key in ("response", "groups"):
        if key not in entries:
            raise InvalidInputError(f"model spec lacks {key!r}")
    groups = _names(entries["groups"])
    if not groups:
        raise InvalidInputError("groups: at least one grouping column is needed")
    random = []
    if "random" in entries:
        for term in _names(entries["random"]):
            if "@" in term:
                lhs, fac = (s.strip() for s in term.split("@", 1))
            elif len(groups) == 1:
                lhs, fac = term, groups[0]
            else:
                raise InvalidInputError(f"random term {term!r} needs '@ group' with several groups")
            if fac not in groups:
                raise InvalidInputError(f"random term {term!r}: {fac!r} is not a grouping column")
            vars_ = [v.strip() for v in lhs.split("+") if v.strip()]
            if not vars_:
                raise InvalidInputError(f"random term {term!r} has no variables")
            random.append((fac, vars_))
    else:
        random = [(g, ["intercept"]) for g in groups]
    structure, default = {}, "diagonal"
    if "structure" in entries:
        for term in _names(entries["structure"]):
            if "@" in term:
                name, fac = (s.strip() for s in term.split("@", 1))
                if fac not in groups:
                    raise InvalidInputError(f"structure term {term!r}: unknown group {fac!r}")
                structure[fac] = parse_structure_name(name)
            else:
                default = parse_structure_name(term)
    phi = None
    if "phi" in entries:
        phi = float(entries["phi"])
        if not phi > 0:
            raise InvalidInputError("phi must be positive")
    return ModelSpec(
        response=entries["response"].strip(),
        groups=groups,
        random=random,
        family=entries.get("family", "bernoulli").strip(),
        covariates=_names(entries["covariates"]) if "covariates" in entries else None,
        unpenalized=_names(entries.get("unpenalized", "")),
        structure=structure,
        default_structure=default,
        intercept=parse_bool(entries.get("intercept", "true"), "intercept"),
        phi=phi,
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

@dataclass
class Table:
    columns: list
    rows: list      # list of lists of strings
    source: str = "<table>"

    def index(self, name):
        try:
            return self.columns.index(name)
        except ValueError:
            raise InvalidInputError(f"{self.source}: no column {name!r}; columns are "
                                    f"{', '.join(self.columns)}") from None

    def numeric(self, name):
        j = self.index(name)
        out = np.empty(len(self.rows))
        for i, row in enumerate(self.rows):
            out[i] = parse_number(row[j], self.source, i + 2, name)
        return out

    def labels(self, name):
        j = self.index(name)
        return np.array([row[j].strip() for row in self.rows], dtype=object)


def parse_number(text, source="<csv>", line=0, column=""):
    """Decimal-point float; NaN, Inf and locale forms like ``1,5`` are rejected."""
    s = text.strip()
    try:
        v = float(s)
    except ValueError:
        raise InvalidInputError(f"{source}: row {line}, column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise InvalidInputError(f"{source}: row {line}, column {column!r}: non-finite value {text!r}")
    return v


def read_csv(path):
    """Read a CSV with a header row; every row must have the header's width."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InvalidInputError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            if len(set(header)) != len(header) or any(not h for h in header):
                raise InvalidInputError(f"{path}: header has empty or duplicate column names")
            rows = []
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise InvalidInputError(f"{path}: row {reader.line_num} has {len(row)} fields, "
                                            f"header has {len(header)}")
                rows.append(row)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    except csv.Error as exc:
        raise InvalidInputError(f"{path}: malformed CSV: {exc}") from exc
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    return Table(header, rows, str(path))


# ---------------------------------------------------------------------------
# spec + table -> problem
# ---------------------------------------------------------------------------

def build_problem(table, spec):
    """Design matrix, grouping factors and covariance template from a spec.

    Columns of X are ``intercept`` (when requested) followed by the
    covariates in spec order.  Random-effect variables must be covariates or
    ``intercept``.
    """
    skip = {spec.response, *spec.groups}
    covs = spec.covariates if spec.covariates is not None else [c for c in table.columns if c not in skip]
    for c in covs:
        if c in skip:
            raise InvalidInputError(f"column {c!r} is the response or a grouping column")
    names = (["intercept"] if spec.intercept else []) + list(covs)
    if len(set(names)) != len(names):
        raise InvalidInputError("duplicate covariate names")
    cols = [np.ones(len(table.rows))] if spec.intercept else []
    cols += [table.numeric(c) for c in covs]
    if not cols:
        raise InvalidInputError("model has no fixed effects")
    X = np.column_stack(cols)
    y = table.numeric(spec.response)
    groups = [table.labels(g) for g in spec.groups]
    re_columns = [[] for _ in spec.groups]
    blocks = []
    for fac, vars_ in spec.random:
        f = spec.groups.index(fac)
        idx = []
        for v in vars_:
            if v not in names:
                raise InvalidInputError(f"random-effect variable {v!r} is not a fixed-effect column")
            idx.append(names.index(v))
        re_columns[f].extend(idx)
        blocks.append(CovBlock(f, tuple(idx), spec.structure.get(fac, spec.default_structure)))
    for f, cols_f in enumerate(re_columns):
        if not cols_f:
            raise InvalidInputError(f"grouping column {spec.groups[f]!r} has no random effect")
    ds = Dataset.create(y, X, groups, re_columns, column_names=names, group_names=spec.groups)
    template = CovarianceTemplate(tuple(blocks))
    mask = default_penalty_mask(ds)
    for c in spec.unpenalized:
        if c not in names:
            raise InvalidInputError(f"unpenalized column {c!r} is not a fixed-effect column")
        mask[names.index(c)] = False
    return GLMMProblem(ds, template, make_family(spec.family, spec.phi), mask)


# ---------------------------------------------------------------------------
# fit.json
# ---------------------------------------------------------------------------

def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def record_to_dict(record, problem, n=None):
    from .selection import information_criterion
    n = problem.n if n is None else n
    beta = record.beta
    names = problem.dataset.column_names
    nz = np.flatnonzero(beta)
    return {
        "lambda": float(record.lam),
        "mode": record.mode,
        "beta": _floats(beta),
        "beta_nonzero": [{"index": int(k), "name": names[k], "value": float(beta[k])} for k in nz],
        "theta": _floats(record.theta),
        "phi": float(record.phi),
        "u_tilde": _floats(record.u_tilde),
        "q_la": float(record.q_la_final),
        "f": float(record.f),
        "df": int(record.df),
        "aic": information_criterion(record, None, n, "AIC"),
        "bic": information_criterion(record, None, n, "BIC"),
        "converged": bool(record.converged),
        "outer_iterations": int(record.outer_iterations),
        "kkt_ok": bool(record.kkt_ok),
        "kkt_violation": float(record.kkt_violation),
        "flags": {k: int(v) for k, v in record.flags.items()},
        "trace": {"first": float(record.trace[0]) if record.trace else None,
                  "last": float(record.trace[-1]) if record.trace else None,
                  "length": len(record.trace)},
    }


def problem_summary(problem):
    tpl = problem.template
    return {
        "n": int(problem.n),
        "p": int(problem.p),
        "family": problem.family.name,
        "columns": list(problem.dataset.column_names),
        "groups": list(problem.dataset.group_names),
        "penalized": [bool(v) for v in problem.penalty_mask],
        "blocks": [{"factor": b.factor, "variables": [int(v) for v in b.variables], "structure": b.structure}
                   for b in tpl.blocks],
    }


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc


def rescore(fit_entry, problem):
    """Q_LA at a stored fit entry, re-solving the mode from the stored u~."""
    from .objective import objective_from_mode
    from .pirls import solve_mode
    beta = np.asarray(fit_entry["beta"], dtype=float)
    theta = np.asarray(fit_entry["theta"], dtype=float)
    if beta.shape != (problem.p,) or theta.shape != (problem.d,):
        raise InvalidInputError("stored fit does not match the model dimensions")
    psi = ParamState(beta, theta, float(fit_entry["phi"]), problem.penalty_mask)
    pr = solve_mode(problem, psi.beta, psi.theta, psi.phi, u_start=np.asarray(fit_entry["u_tilde"], float))
    return objective_from_mode(pr, psi.beta, problem.penalty_mask, float(fit_entry["lambda"])).q_la


# ---------------------------------------------------------------------------
# epilepsy-format data
# ---------------------------------------------------------------------------

EPILEPSY_COLUMNS = ("subject", "y", "Base", "Trt", "Age", "V4")


def load_epilepsy(path):
    """Load an epilepsy-format CSV and return ``(problem, table)``.

    Column contract: ``subject`` (id), ``y`` (seizure count, nonnegative
    integer), ``Base`` (baseline count), ``Trt`` (0/1 treatment), ``Age``
    (years) and ``V4`` (0/1 indicator of the fourth visit), four rows per
    subject.  The model is a Poisson random-intercept model with an
    observation-level random intercept, covariates log(Base/4), Trt,
    their interaction, log(Age) and V4.
    """
    t = read_csv(path)
    for c in EPILEPSY_COLUMNS:
        t.index(c)
    y = t.numeric("y")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise InvalidInputError(f"{path}: y must hold nonnegative integer counts")
    subj = t.labels("subject")
    _, counts = np.unique(subj, return_counts=True)
    if np.any(counts != 4):
        raise InvalidInputError(f"{path}: every subject needs exactly 4 visits")
    base = t.numeric("Base")
    age = t.numeric("Age")
    if np.any(base <= 0) or np.any(age <= 0):
        raise InvalidInputError(f"{path}: Base and Age must be positive")
    trt = t.numeric("Trt")
    lb = np.log(base / 4.0)
    X = np.column_stack([np.ones(y.size), lb, trt, lb * trt, np.log(age), t.numeric("V4")])
    names = ["intercept", "lBase4", "Trt", "lBase4:Trt", "lAge", "V4"]
    obs = np.arange(y.size)
    ds = Dataset.create(y, X, [subj, obs], [[0], [0]], column_names=names, group_names=["subject", "obs"])
    tpl = CovarianceTemplate((CovBlock(0, (0,), "diagonal"), CovBlock(1, (0,), "diagonal")))
    return GLMMProblem(ds, tpl, make_family("poisson")), t


__all__ = ["ModelSpec", "Table", "parse_kv", "read_kv", "parse_model_spec", "read_csv", "build_problem",
           "record_to_dict", "problem_summary", "write_json", "read_json", "rescore", "load_epilepsy",
           "parse_number", "parse_bool", "INTERCEPT"]
