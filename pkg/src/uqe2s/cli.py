"""Command-line front end: ``uqe estimate | bounds | simulate``.

Configuration comes from three layers with precedence flags > JSON file >
defaults. The file may use nested sections or dotted keys
(``{"estimator": {"lambda_link": "probit"}}`` and
``{"estimator.lambda_link": "probit"}`` are equivalent); unknown keys are
rejected. Relative data paths in a file resolve against the file's directory.

Exit codes: 0 success, 2 validation error, 3 numerical failure. Failures
print a one-line JSON payload on stderr with the error class, the failing
pipeline step and the message.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import estimate_bounds
from .counterfactual import ShiftKind, build_counterfactual
from .errors import UqeError, ValidationError
from .plotting import bounds_figure, effect_profile_figure, mc_figure
from .propensity import fit_propensity_model
from .sample import merge_samples, read_aux_csv, read_study_csv, validate_overlap
from .simulation import DgpSpec, generate_merged, oracle_uqe, run_monte_carlo
from .uqe import EstimatorConfig, fit_theta, run_pipeline

__all__ = ["RunConfig", "parse_config", "run_estimate", "run_bounds", "run_simulate", "main"]

COMMANDS = ("estimate", "bounds", "simulate")

_ESTIMATOR_DEFAULTS = {f.name: f.default for f in fields(EstimatorConfig)}
_DGP_DEFAULTS = {f.name: f.default for f in fields(DgpSpec) if f.name not in ("seed",)}

_TOP_DEFAULTS = {
    "study": None,
    "aux": None,
    "tau": (0.5,),
    "counterfactual.kind": ("MQS",),
    "counterfactual.source": "auto",
    "discrete_x": False,
    "output": "uqe_out",
    "seed": 0,
    "threads": 1,
    "plots": True,
    "simulation.n_reps": 100,
    "simulation.oracle": True,
    "simulation.oracle_draws": 1_000_000,
    "simulation.oracle_t_step": 0.01,
    "simulation.replications_csv": True,
    "bounds.max_levels": 50,
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration."""

    command: str
    study: str | None
    aux: str | None
    dgp: DgpSpec | None
    tau: tuple[float, ...]
    kinds: tuple[str, ...]
    counterfactual: object
    discrete_x: bool
    output: str
    seed: int
    threads: int
    plots: bool
    estimator: EstimatorConfig
    n_reps: int
    oracle: bool
    oracle_draws: int
    oracle_t_step: float
    replications_csv: bool
    max_levels: int
    explicit: frozenset = field(default_factory=frozenset, compare=False)

    def to_dict(self) -> dict:
        d = {
            "command": self.command,
            "tau": list(self.tau),
            "counterfactual": {"kind": list(self.kinds), "source": self.counterfactual},
            "discrete_x": self.discrete_x,
            "seed": self.seed,
            "estimator": asdict(self.estimator),
        }
        if self.dgp is not None:
            d["dgp"] = asdict(self.dgp)
            d["dgp"].pop("seed")
        else:
            d["study"] = self.study
            d["aux"] = self.aux
        if self.command == "simulate":
            d["simulation"] = {"n_reps": self.n_reps, "oracle": self.oracle, "oracle_draws": self.oracle_draws,
                               "oracle_t_step": self.oracle_t_step}
        if self.command == "bounds" or self.discrete_x:
            d["bounds"] = {"max_levels": self.max_levels}
        return d


# --------------------------------------------------------------------------- value coercion


def _bad(key, msg):
    err = ValidationError(f"config key {key!r}: {msg}")
    err.step = "config"
    return err


def _to_bool(key, v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
        return v.lower() in ("true", "1", "yes")
    raise _bad(key, f"expected a boolean, got {v!r}")


def _to_int(key, v):
    if isinstance(v, bool):
        raise _bad(key, f"expected an integer, got {v!r}")
    try:
        f = float(v)
    except (TypeError, ValueError):
        raise _bad(key, f"expected an integer, got {v!r}") from None
    if not f.is_integer():
        raise _bad(key, f"expected an integer, got {v!r}")
    return int(f)


def _to_float(key, v):
    if isinstance(v, bool):
        raise _bad(key, f"expected a number, got {v!r}")
    try:
        return float(v)
    except (TypeError, ValueError):
        raise _bad(key, f"expected a number, got {v!r}") from None


def _as_list(v):
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


def _coerce(key: str, v, default):
    """Coerce ``v`` to the type of ``default``."""
    if key == "tau":
        taus = tuple(_to_float(key, t) for t in _as_list(v))
        if not taus:
            raise _bad(key, "at least one quantile level is required")
        for t in taus:
            if not 0 < t < 1:
                raise _bad(key, f"quantile level {t} is outside (0, 1)")
        return taus
    if key == "counterfactual.kind":
        kinds = []
        for k in _as_list(v):
            try:
                kinds.append(ShiftKind.parse(k).value)
            except ValidationError as exc:
                raise _bad(key, str(exc)) from None
        if not kinds:
            raise _bad(key, "at least one shift kind is required")
        return tuple(dict.fromkeys(kinds))
    if key == "counterfactual.source":
        if isinstance(v, (str, dict)):
            return v
        raise _bad(key, f"expected a string or mapping, got {type(v).__name__}")
    if key in ("study", "aux"):
        if v is None or isinstance(v, str):
            return v
        raise _bad(key, f"expected a path string, got {v!r}")
    if key.endswith(("bandwidth_y", "bandwidth_x")):
        if isinstance(v, str) and v in ("paper", "n13"):
            return v
        f = _to_float(key, v)
        if not f > 0:
            raise _bad(key, "bandwidth must be positive")
        return f
    if key == "dgp.cutpoints":
        return None if v is None else tuple(_to_float(key, c) for c in _as_list(v))
    if isinstance(default, bool):
        return _to_bool(key, v)
    if isinstance(default, int):
        return _to_int(key, v)
    if isinstance(default, float):
        return _to_float(key, v)
    if isinstance(default, tuple):
        items = _as_list(v)
        if default and isinstance(default[0], str):
            return tuple(str(s) for s in items)
        return tuple(_to_float(key, s) for s in items)
    if isinstance(default, str):
        if not isinstance(v, str):
            raise _bad(key, f"expected a string, got {v!r}")
        return v
    return v


# alternative spellings accepted in config files and --set
_ALIASES = {
    "propensity.link": "estimator.prop_link",
    "propensity.basis_k": "estimator.basis_k",
    "propensity.basis_t": "estimator.basis_t",
    "propensity.degree": "estimator.basis_degree",
    "lambda.link": "estimator.lambda_link",
    "lambda.index": "estimator.lambda_index",
    "gmm.basis_e": "estimator.basis_e",
    "gmm.weighting": "estimator.gmm_weighting",
    "gmm.tol": "estimator.gmm_tol",
    "gmm.max_iter": "estimator.gmm_max_iter",
    "kernel.y": "estimator.kernel_y",
    "kernel.x": "estimator.kernel_x",
    "bandwidth.y": "estimator.bandwidth_y",
    "bandwidth.x": "estimator.bandwidth_x",
    "shift": "counterfactual.kind",
}


def _schema() -> dict:
    s = dict(_TOP_DEFAULTS)
    s.update({f"estimator.{k}": v for k, v in _ESTIMATOR_DEFAULTS.items()})
    s.update({f"dgp.{k}": v for k, v in _DGP_DEFAULTS.items()})
    return s


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        # a counterfactual source may itself be a mapping
        if isinstance(v, dict) and key != "counterfactual.source":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise _bad("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise _bad("config", f"{path} is not valid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise _bad("config", "top level must be a JSON object")
    return _flatten(raw), path.resolve().parent


def parse_config(command: str, file_values: dict | None = None, flag_values: dict | None = None,
                 base_dir=None) -> RunConfig:
    """Merge defaults, file values and flag values (highest precedence) into a :class:`RunConfig`."""
    if command not in COMMANDS:
        raise _bad("command", f"unknown command {command!r}")
    schema = _schema()
    base = Path(base_dir) if base_dir is not None else None
    values = dict(schema)
    explicit = set()
    for layer, from_file in ((file_values or {}, True), (flag_values or {}, False)):
        for key, v in layer.items():
            key = _ALIASES.get(key, key)
            if key not in schema:
                raise _bad(key, "unknown configuration key")
            if v is None and key not in ("study", "aux", "dgp.cutpoints"):
                continue
            v = _coerce(key, v, schema[key])
            if from_file and base is not None:
                if key in ("study", "aux") and v is not None and not Path(v).is_absolute():
                    v = str(base / v)
                if key == "counterfactual.source" and isinstance(v, str) and v.lower().startswith("file:"):
                    p = Path(v[5:])
                    if not p.is_absolute():
                        v = "file:" + str(base / p)
            values[key] = v
            explicit.add(key)

    uses_dgp = any(k.startswith("dgp.") for k in explicit)
    uses_files = values["study"] is not None or values["aux"] is not None
    if command == "simulate":
        if uses_files:
            raise _bad("study", "simulate draws its own data; study/aux files are not allowed")
        uses_dgp = True
    elif uses_dgp and uses_files:
        raise _bad("dgp", "give either study/aux files or a dgp section, not both")
    elif not uses_dgp and (values["study"] is None or values["aux"] is None):
        raise _bad("study", "both study and aux files are required (or a dgp section)")

    dgp = None
    if uses_dgp:
        try:
            dgp = DgpSpec(**{k[4:]: values[k] for k in schema if k.startswith("dgp.")})
        except ValidationError as exc:
            raise _bad("dgp", str(exc)) from None
        except TypeError as exc:
            raise _bad("dgp", str(exc)) from None
    try:
        est = EstimatorConfig(**{k[10:]: values[k] for k in schema if k.startswith("estimator.")})
    except TypeError as exc:
        raise _bad("estimator", str(exc)) from None

    discrete = bool(values["discrete_x"]) or command == "bounds"
    kinds = values["counterfactual.kind"]
    if discrete:
        if "counterfactual.kind" not in explicit:
            kinds = ("MDS",)
        elif kinds != ("MDS",):
            raise _bad("counterfactual.kind", "only MDS is defined for a discrete covariate")
    if values["threads"] < 1:
        raise _bad("threads", "must be at least 1")
    if values["simulation.n_reps"] < 1:
        raise _bad("simulation.n_reps", "must be at least 1")
    if values["bounds.max_levels"] < 2:
        raise _bad("bounds.max_levels", "must be at least 2")
    if command == "simulate" and dgp.discrete:
        raise _bad("dgp.cutpoints", "simulate covers the continuous design; use bounds for a discrete covariate")

    return RunConfig(
        command=command,
        study=values["study"],
        aux=values["aux"],
        dgp=dgp,
        tau=values["tau"],
        kinds=kinds,
        counterfactual=values["counterfactual.source"],
        discrete_x=discrete,
        output=values["output"],
        seed=values["seed"],
        threads=values["threads"],
        plots=values["plots"],
        estimator=est,
        n_reps=values["simulation.n_reps"],
        oracle=values["simulation.oracle"],
        oracle_draws=values["simulation.oracle_draws"],
        oracle_t_step=values["simulation.oracle_t_step"],
        replications_csv=values["simulation.replications_csv"],
        max_levels=values["bounds.max_levels"],
        explicit=frozenset(explicit),
    )


# --------------------------------------------------------------------------- output helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(doc: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}" if math.isfinite(v) else "nan"
    return str(v)


def write_csv(rows: list[dict], columns: list[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def table_rows(results: list[dict], taus) -> tuple[list[dict], list[str]]:
    """Estimate / se / zero-test p rows per shift kind, one column per quantile level."""
    cols = [f"tau={t:g}" for t in taus]
    rows = []
    kinds = list(dict.fromkeys(r["kind"] for r in results))
    for kind in kinds:
        for stat, key in (("estimate", "point"), ("se", "se_improved"), ("p_value", "p_value")):
            row = {"shift": kind, "statistic": stat}
            for t, c in zip(taus, cols):
                hit = [r for r in results if r["kind"] == kind and r["tau"] == t]
                row[c] = hit[0][key] if hit else ""
            rows.append(row)
    return rows, ["shift", "statistic"] + cols


# --------------------------------------------------------------------------- commands


def _load_data(cfg: RunConfig):
    if cfg.dgp is not None:
        return generate_merged(cfg.dgp, seed=cfg.seed)
    merged = merge_samples(read_study_csv(cfg.study), read_aux_csv(cfg.aux))
    return merged


def _resolve_counterfactual(cfg: RunConfig, merged, prop=None):
    """Return ``(G, label)``; ``auto`` becomes a concrete, echoed specification."""
    src = cfg.counterfactual
    if not (isinstance(src, str) and src.strip().lower() == "auto"):
        return build_counterfactual(src), src
    if cfg.discrete_x:
        pts = np.unique(merged.x)
        spec = {"points": pts.tolist(), "probs": (np.ones(pts.size) / pts.size).tolist()}
        return build_counterfactual(spec), spec
    if prop is None:
        bk, bt, _ = cfg.estimator.bases()
        prop = fit_propensity_model(merged, bk, bt, cfg.estimator.prop_link)
    w = prop.ell_hat / prop.ell_hat.sum()
    mu = float(np.dot(w, merged.x))
    sd = float(np.sqrt(np.dot(w, (merged.x - mu) ** 2)))
    label = f"normal({mu:.6g},{sd:.6g})"
    return build_counterfactual(label), label


def run_estimate(cfg: RunConfig) -> dict:
    """Steps 1-6 for every quantile level and shift kind; writes the report files."""
    if cfg.discrete_x:
        return run_bounds(cfg)
    merged = _load_data(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        overlap = validate_overlap(merged)
        G, g_label = _resolve_counterfactual(cfg, merged)
        results = [r.to_dict() for r in run_pipeline(merged, cfg.tau, cfg.kinds, G, cfg.estimator)]
    out = Path(cfg.output)
    config = cfg.to_dict()
    config["counterfactual"]["resolved"] = g_label
    doc = {
        "version": __version__,
        "config": config,
        "estimates": results,
        "diagnostics": {
            "n": merged.n,
            "n_study": merged.n_s,
            "n_aux": merged.n_a,
            "overlap": asdict(overlap),
            "warnings": sorted({str(w.message) for w in caught}),
        },
    }
    files = [write_json(doc, out / "result.json")]
    plot_rows = [{"tau": r["tau"], "kind": r["kind"], "point": r["point"], "ci_lo": r["ci_95"][0],
                  "ci_hi": r["ci_95"][1]} for r in results]
    files.append(write_csv(plot_rows, ["tau", "kind", "point", "ci_lo", "ci_hi"], out / "plot_data.csv"))
    rows, cols = table_rows(results, cfg.tau)
    files.append(write_csv(rows, cols, out / "table.csv"))
    if cfg.plots:
        files.append(effect_profile_figure(plot_rows, out / "effect_profile.png"))
    doc["files"] = [str(f) for f in files]
    return doc


def run_bounds(cfg: RunConfig) -> dict:
    """Estimated identified intervals for a discrete covariate."""
    merged = _load_data(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        overlap = validate_overlap(merged)
        bk, bt, _ = cfg.estimator.bases()
        prop = fit_propensity_model(merged, bk, bt, cfg.estimator.prop_link)
        G, g_label = _resolve_counterfactual(cfg, merged, prop)
        res = []
        for tau in cfg.tau:
            th = fit_theta(merged, tau, cfg.estimator, prop)
            res.append(estimate_bounds(merged, th, G, tau, max_levels=cfg.max_levels).to_dict())
    out = Path(cfg.output)
    config = cfg.to_dict()
    config["counterfactual"]["resolved"] = g_label
    doc = {
        "version": __version__,
        "config": config,
        "bounds": res,
        "diagnostics": {
            "n": merged.n,
            "n_study": merged.n_s,
            "n_aux": merged.n_a,
            "overlap": asdict(overlap),
            "warnings": sorted({str(w.message) for w in caught}),
        },
    }
    files = [write_json(doc, out / "result.json")]
    files.append(write_csv(res, ["tau", "lower", "upper", "width", "collapsed", "f_y_at_q", "q_hat"],
                           out / "bounds.csv"))
    term_rows = [dict(tau=b["tau"], **{k: v for k, v in t.items() if not k.startswith("z1_")},
                      z1_star=" ".join(_fmt(z) for z in t["z1_star"]),
                      z1_dagger=" ".join(_fmt(z) for z in t["z1_dagger"])) for b in res for t in b["terms"]]
    files.append(write_csv(term_rows, ["tau", "j", "x_jm1", "x_j", "G_jm1", "F_jm1", "set", "z1_star",
                                       "z1_dagger", "h_star", "h_dagger"], out / "bounds_terms.csv"))
    if cfg.plots:
        files.append(bounds_figure(res, out / "bounds.png"))
    doc["files"] = [str(f) for f in files]
    return doc


def run_simulate(cfg: RunConfig) -> dict:
    """Monte Carlo study on the simulation design, with oracle comparisons."""
    G_spec = cfg.counterfactual
    if isinstance(G_spec, str) and G_spec.strip().lower() == "auto":
        G_spec = "normal(0.3,1.5)"
    oracle = {}
    oracle_detail = []
    if cfg.oracle:
        for tau in cfg.tau:
            for kind in cfg.kinds:
                o = oracle_uqe(cfg.dgp, tau, G_spec, kind, t_step=cfg.oracle_t_step, n_draws=cfg.oracle_draws)
                oracle[(tau, kind)] = o.value
                oracle_detail.append(dict(tau=tau, kind=kind, **asdict(o)))
    rep = run_monte_carlo(cfg.dgp, cfg.estimator, cfg.n_reps, cfg.seed, cfg.tau, cfg.kinds, G_spec,
                          oracle or None, workers=cfg.threads)
    out = Path(cfg.output)
    config = cfg.to_dict()
    config["counterfactual"]["resolved"] = G_spec
    doc = {
        "version": __version__,
        "config": config,
        "summary": rep.summary,
        "oracle": oracle_detail,
        "diagnostics": {"n_reps": rep.n_reps, "n_failed": rep.n_failed, "failures": rep.failures},
    }
    files = [write_json(doc, out / "result.json")]
    cols = ["tau", "kind", "n_ok", "mean", "sd", "mean_se_improved", "mean_se_plugin", "mean_d_hat", "sd_d_hat",
            "rejection_rate", "oracle", "bias", "rmse", "coverage"]
    files.append(write_csv(rep.summary, cols, out / "mc_summary.csv"))
    if cfg.replications_csv:
        recs = [dict(r, ci_lo=r["ci_95"][0], ci_hi=r["ci_95"][1]) for r in rep.records]
        files.append(write_csv(recs, ["rep", "tau", "kind", "point", "d_hat", "f_y_at_q", "q_hat", "bias",
                                      "se_plugin", "se_improved", "ci_lo", "ci_hi", "test_statistic", "p_value",
                                      "n", "n_retained"], out / "replications.csv"))
    if cfg.plots:
        files.append(mc_figure(rep.records, rep.summary, out / "mc.png"))
    doc["files"] = [str(f) for f in files]
    doc["runtime_s"] = rep.runtime_s
    return doc


# --------------------------------------------------------------------------- argument parsing


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise _bad(item, "--set expects KEY=VALUE")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uqe", description="Unconditional quantile effects with a missing covariate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", dest="output", help="output directory (default uqe_out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="maximum worker processes")
        sp.add_argument("--tau", action="append", help="quantile level(s); repeat or comma-separate")
        sp.add_argument("--shift", dest="counterfactual.kind", action="append", help="MQS, MDS or MLS")
        sp.add_argument("--counterfactual", dest="counterfactual.source",
                        help="normal(mu,sd) | uniform(a,b) | table:u:q,... | file:donor.csv | auto")
        sp.add_argument("--prop-link", dest="estimator.prop_link", choices=["logit", "probit"])
        sp.add_argument("--lambda-link", dest="estimator.lambda_link", choices=["logit", "probit"])
        sp.add_argument("--lambda-index", dest="estimator.lambda_index", help="comma-separated terms")
        sp.add_argument("--kernel-y", dest="estimator.kernel_y")
        sp.add_argument("--bandwidth-y", dest="estimator.bandwidth_y")
        sp.add_argument("--gmm-weighting", dest="estimator.gmm_weighting", choices=["identity", "twostep"])
        sp.add_argument("--no-plots", dest="plots", action="store_const", const=False)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")

    for name, helptext in (("estimate", "point estimates, standard errors and zero-effect tests"),
                           ("bounds", "identified interval for a discrete covariate")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--study", help="study CSV (y, z1_*, z2_*)")
        sp.add_argument("--aux", help="auxiliary CSV (x, z1_*, z2_*)")
        if name == "estimate":
            sp.add_argument("--discrete-x", dest="discrete_x", action="store_const", const=True,
                            help="treat x as discrete and report bounds")
        common(sp)
    sp = sub.add_parser("simulate", help="Monte Carlo study against the brute-force oracle")
    sp.add_argument("--n-reps", dest="simulation.n_reps", type=int)
    sp.add_argument("--n", dest="dgp.n", type=int, help="rows per replication")
    sp.add_argument("--oracle-draws", dest="simulation.oracle_draws", type=int)
    common(sp)
    return p


_NOT_CONFIG = {"command", "config", "set"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ns = vars(args)
        flags = {k: v for k, v in ns.items() if k not in _NOT_CONFIG and v is not None}
        for k in ("tau", "counterfactual.kind"):
            if k in flags:
                flags[k] = [s for item in flags[k] for s in _as_list(item)]
        flags.update(_parse_set(ns.get("set")))
        file_vals, base = load_config_file(ns["config"]) if ns.get("config") else ({}, None)
        cfg = parse_config(args.command, file_vals, flags, base)
        runner = {"estimate": run_estimate, "bounds": run_bounds, "simulate": run_simulate}[cfg.command]
        doc = runner(cfg)
    except UqeError as exc:
        code = 2 if isinstance(exc, ValidationError) else 3
        payload = {"error": type(exc).__name__, "category": "validation" if code == 2 else "numerical",
                   "step": exc.step, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return code
    for f in doc.get("files", []):
        print(f)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
