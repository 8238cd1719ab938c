"""Command-line entry point.

Subcommands: ``simulate`` (replicate study to CSV + JSON), ``fit`` (one
dataset from CSV to a JSON report), ``truth`` (marginal coefficients of a
generating configuration to JSON), and ``bench`` (kernel timing grid to
CSV).  Settings come from an INI config file, overridable by flags; every
report echoes the resolved configuration and seed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DivergenceError,
    AggregateChainFailure,
    ParseError,
    Sgee2Error,
)
from .estimators import (
    EstimatorChoice,
    ScoringControls,
    fit_pipeline,
    fit_psee,
    fit_omee,
)
from .inference import sandwich_variance, wald
from .model import ClusterData, Dataset, ModelSpec, ParameterVector
from .simgen import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    EstimatorRequest,
    GenerationConfig,
    generating_spec,
    marginal_truth,
    run_replicates,
)
from .stochastic import SamplingPlan, s_dr_gee2
from .bench import STRUCTURES, bench_grid
from . import estimators as _estimators

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_CONVERGENCE = 4

_PARAMS = ("beta0", "beta_a", "alpha0", "alpha_a")


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

def _check_header(fields):
    fixed = ("cluster_id", "treat", "y")
    if tuple(fields[:3]) != fixed:
        raise ParseError(
            f"header must start with {', '.join(fixed)}, got {fields[:3]}", row=1
        )
    z_labels = []
    x_labels = []
    for name in fields[3:]:
        if name.startswith("z") and name[1:].isdigit():
            z_labels.append(name)
        elif name.startswith("x") and name[1:].isdigit():
            x_labels.append(name)
        else:
            raise ParseError(f"unknown column {name!r}", row=1)
    want = [f"z{i + 1}" for i in range(len(z_labels))]
    want += [f"x{i + 1}" for i in range(len(x_labels))]
    # the reader slices columns positionally, so interleaving is an error
    if list(fields[3:]) != want:
        raise ParseError(
            f"covariate columns must be z1..zq then x1..xm, got {fields[3:]}", row=1
        )
    return z_labels, x_labels


def _parse_binary(text, row, column):
    if text not in ("0", "1"):
        raise ParseError(f"column {column} must be 0 or 1, got {text!r}", row=row)
    return int(text)


def ingest_csv(path) -> Dataset:
    """Long-format reader: one row per subject, empty y means unobserved."""
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        z_labels, x_labels = _check_header(header)
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise ParseError(
                    f"expected {width} fields, got {len(rec)}", row=lineno
                )
            cid = rec[0]
            treat = _parse_binary(rec[1], lineno, "treat")
            ytext = rec[2].strip()
            if ytext == "":
                y = np.nan
            else:
                y = float(_parse_binary(ytext, lineno, "y"))
            try:
                zs = [float(v) for v in rec[3 : 3 + len(z_labels)]]
                xs = [float(v) for v in rec[3 + len(z_labels) :]]
            except ValueError as exc:
                raise ParseError(f"bad numeric field: {exc}", row=lineno) from None
            if cid not in rows:
                rows[cid] = []
                order.append(cid)
            rows[cid].append((lineno, treat, y, zs, xs))
    if not order:
        raise ParseError("no data rows", row=2)
    clusters = []
    for cid in order:
        recs = rows[cid]
        treats = {r[1] for r in recs}
        if len(treats) > 1:
            raise ParseError(
                f"treat varies within cluster {cid!r}", row=recs[0][0]
            )
        for pos in range(len(recs[0][3])):
            vals = {r[3][pos] for r in recs}
            if len(vals) > 1:
                raise ParseError(
                    f"cluster-level column z{pos + 1} varies within cluster {cid!r}",
                    row=recs[0][0],
                )
        clusters.append(
            ClusterData(
                id=cid,
                a=recs[0][1],
                z=np.asarray(recs[0][3]),
                x=np.asarray([r[4] for r in recs]),
                y=np.asarray([r[2] for r in recs]),
            )
        )
    return Dataset(tuple(clusters))


def export_csv(dataset: Dataset, path) -> None:
    """Inverse of ingest_csv; NaN outcomes render as empty fields."""
    q = dataset.clusters[0].z.shape[0]
    m = dataset.clusters[0].x.shape[1]
    header = ["cluster_id", "treat", "y"]
    header += [f"z{i + 1}" for i in range(q)]
    header += [f"x{i + 1}" for i in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cl in dataset.clusters:
            for j in range(cl.n):
                y = "" if np.isnan(cl.y[j]) else str(int(cl.y[j]))
                writer.writerow(
                    [cl.id, cl.a, y]
                    + [repr(float(v)) for v in cl.z]
                    + [repr(float(v)) for v in cl.x[j]]
                )


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _read_config(path):
    cp = configparser.ConfigParser()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
    return cp

def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _labels(text):
    text = text.strip()
    return tuple(s.strip() for s in text.split(",")) if text else ()


def _generation_config(cp, args):
    g = cp["generation"] if cp.has_section("generation") else {}
    missing = str(g.get("missing", "true")).lower() in ("1", "true", "yes")
    cfg = GenerationConfig(
        method=getattr(args, "method", None) or g.get("method", "parzen"),
        n_clusters=int(
            getattr(args, "clusters", None) or g.get("n_clusters", 100)
        ),
        size_law=(
            int(g.get("size_low", 80)),
            int(g.get("size_high", 140)),
        ),
        y_beta=_floats(g.get("y_beta", "")) if g.get("y_beta") else DEFAULT_BETA,
        y_alpha=_floats(g.get("y_alpha", "")) if g.get("y_alpha") else DEFAULT_ALPHA,
        r_beta=(
            (_floats(g.get("r_beta", "")) if g.get("r_beta") else DEFAULT_BETA)
            if missing
            else None
        ),
        r_alpha=(
            (_floats(g.get("r_alpha", "")) if g.get("r_alpha") else DEFAULT_ALPHA)
            if missing
            else None
        ),
        p_a=float(g.get("p_a", 0.5)),
        seed=int(args.seed if args.seed is not None else g.get("seed", 0)),
    )
    return cfg


def _sampling_plan(cp, args):
    s = cp["sampling"] if cp.has_section("sampling") else {}
    return SamplingPlan(
        pi_s=float(
            getattr(args, "pi_s", None)
            if getattr(args, "pi_s", None) is not None
            else s.get("pi_s", 0.30)
        ),
        omega_nuisance=int(
            getattr(args, "omega_nuisance", None) or s.get("omega_nuisance", 20)
        ),
        omega_tm=int(getattr(args, "omega_tm", None) or s.get("omega_tm", 10)),
        seed=int(args.seed if args.seed is not None else s.get("seed", 0)),
        chains=int(getattr(args, "chains", None) or s.get("chains", 1)),
    )


def _spec_from(section, prefix, target, default_spec):
    main = section.get(f"{prefix}_main")
    interact = section.get(f"{prefix}_interact")
    corr_main = section.get(f"{prefix}_corr_main")
    corr_interact = section.get(f"{prefix}_corr_interact")
    if main is None and interact is None and corr_main is None and corr_interact is None:
        return default_spec
    return ModelSpec(
        target=target,
        mean_main=_labels(main or ""),
        mean_interact=_labels(interact or ""),
        corr_main=_labels(corr_main or ""),
        corr_interact=_labels(corr_interact or ""),
    )


def _controls(cp):
    s = cp["controls"] if cp.has_section("controls") else {}
    return ScoringControls(
        tol=float(s.get("tol", 1e-8)),
        max_iter=int(s.get("max_iter", 50)),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _provenance(args, cp):
    echo = {sec: dict(cp[sec]) for sec in cp.sections()}
    return {
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config": echo,
    }


def _outdir(args) -> Path:
    out = Path(args.output) if args.output else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    return out


def truth_command(args) -> int:
    cp = _read_config(args.config)
    cfg = _generation_config(cp, args)
    values = marginal_truth(cfg)
    out = _outdir(args)
    payload = {
        "provenance": _provenance(args, cp),
        "method": cfg.method,
        "truth": dict(zip(_PARAMS, values)),
    }
    path = out / "truth.json"
    path.write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload["truth"], indent=2))
    return EXIT_OK


_KIND_ALIASES = {
    "cc": "complete_case",
    "complete_case": "complete_case",
    "ipw_g1": "ipw_g1",
    "ipw_g2": "ipw_g2",
    "dr": "doubly_robust",
    "doubly_robust": "doubly_robust",
}


def simulate_command(args) -> int:
    cp = _read_config(args.config)
    cfg = _generation_config(cp, args)
    plan = _sampling_plan(cp, args)
    sim = cp["simulate"] if cp.has_section("simulate") else {}
    names = _labels(
        getattr(args, "estimators", None) or sim.get("estimators", "cc,ipw_g1,ipw_g2,dr")
    )
    solver = getattr(args, "solver", None) or sim.get("solver", "deterministic")
    reps = int(getattr(args, "replicates", None) or sim.get("replicates", 10))
    with_sandwich = str(sim.get("with_sandwich", "false")).lower() in (
        "1",
        "true",
        "yes",
    )
    requests = []
    for name in names:
        if name not in _KIND_ALIASES:
            raise ConfigError(f"unknown estimator {name!r}")
        requests.append(EstimatorRequest(name, _KIND_ALIASES[name], solver=solver))
    summary = run_replicates(
        cfg,
        tuple(requests),
        reps,
        plan=plan,
        controls=_controls(cp),
        with_sandwich=with_sandwich,
    )
    out = _outdir(args)
    payload = {"provenance": _provenance(args, cp), **summary.as_dict()}
    (out / "simulate.json").write_text(json.dumps(payload, indent=2))
    with open(out / "simulate.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "estimator",
                "parameter",
                "truth",
                "bias",
                "replicate_se",
                "sandwich_se",
                "n_converged",
                "pct_psm_error",
                "pct_om_error",
                "pct_both_error",
                "pct_tm_error",
            ]
        )
        for row in summary.rows:
            for k, pname in enumerate(_PARAMS):
                writer.writerow(
                    [
                        row.name,
                        pname,
                        summary.truth[k],
                        row.bias[k],
                        row.replicate_se[k],
                        row.sandwich_se[k],
                        row.n_converged,
                        row.pct_psm_error,
                        row.pct_om_error,
                        row.pct_both_error,
                        row.pct_tm_error,
                    ]
                )
    print(f"wrote {out / 'simulate.csv'} and {out / 'simulate.json'}")
    return EXIT_OK


def _stage_report(fit, se=None):
    rep = {
        "estimates": {
            "beta": [float(v) for v in fit.theta.beta],
            "alpha": [float(v) for v in fit.theta.alpha],
        },
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "runtime_seconds": {k: float(v) for k, v in (fit.runtime or {}).items()},
    }
    if se is not None:
        rep["sandwich_se"] = [float(v) for v in se]
        stacked = fit.theta.stacked
        rep["wald_p"] = [
            float(wald(stacked[j], se[j]).p_value) if se[j] > 0 else float("nan")
            for j in range(stacked.shape[0])
        ]
    return rep


def fit_command(args) -> int:
    cp = _read_config(args.config)
    dataset = ingest_csv(args.input)
    section = cp["fit"] if cp.has_section("fit") else {}
    kind_name = getattr(args, "estimator", None) or section.get("estimator", "dr")
    if kind_name not in _KIND_ALIASES:
        raise ConfigError(f"unknown estimator {kind_name!r}")
    kind = _KIND_ALIASES[kind_name]
    solver = getattr(args, "solver", None) or section.get("solver", "deterministic")
    if solver not in ("deterministic", "stochastic", "parallel_stochastic"):
        raise ConfigError(f"unknown solver {solver!r}")
    plan = _sampling_plan(cp, args)
    controls = _controls(cp)
    tm_spec = ModelSpec(target="TM")
    psm_spec = _spec_from(section, "psm", "PSM", generating_spec("PSM"))
    om_spec = _spec_from(section, "om", "OM", generating_spec("OM"))

    t_start = time.perf_counter()
    chains_report = None
    if solver == "deterministic":
        fit = fit_pipeline(
            dataset, EstimatorChoice(kind, "deterministic"),
            tm_spec, psm_spec if kind != "complete_case" else None,
            om_spec if kind == "doubly_robust" else None, controls,
        )
    else:
        from .simgen import _fit_one

        if solver == "parallel_stochastic" and kind == "doubly_robust":
            psee = fit_psee(dataset, psm_spec, controls)
            omee = fit_omee(dataset, om_spec, controls)
            chains = []
            times = []
            for k in range(plan.chains):
                t0 = time.perf_counter()
                chains.append(
                    s_dr_gee2(dataset, tm_spec, psee, omee, plan, chain=k,
                              controls=controls)
                )
                times.append(time.perf_counter() - t0)
            good = [
                (c, dt) for c, dt in zip(chains, times) if c.converged
            ]
            if not good:
                raise AggregateChainFailure(
                    [c.divergence_reason for c in chains]
                )
            theta = ParameterVector(
                np.mean([c.theta.beta for c, _ in good], axis=0),
                np.mean([c.theta.alpha for c, _ in good], axis=0),
            )
            fit = _estimators.FitResult(
                spec=tm_spec, theta=theta, converged=True,
                iterations=plan.omega_tm, max_update=float("nan"),
                condition_diag=float("nan"), kind=kind,
                mode="parallel_stochastic", psee=psee, omee=omee,
            )
            chains_report = {
                "requested": plan.chains,
                "convergent": len(good),
                "median_runtime_seconds": float(
                    np.median([dt for _, dt in good])
                ),
            }
        else:
            req = EstimatorRequest("fit", kind, solver=solver,
                                   psm_spec=psm_spec, om_spec=om_spec)
            fit, psm_err, om_err, tm_err, _ = _fit_one(
                dataset, req, tm_spec, plan, controls
            )
            if fit is None:
                stage = "psm" if psm_err else ("om" if om_err else "tm")
                raise DivergenceError(stage, "stochastic fit did not converge")
    wall = time.perf_counter() - t_start

    tm_se = None
    try:
        tm_se = sandwich_variance(dataset, fit).tm_se
    except Sgee2Error:
        pass
    report = {
        "provenance": _provenance(args, cp),
        "estimator": kind,
        "solver": solver,
        "n_clusters": len(dataset.clusters),
        "wall_seconds": wall,
        "stages": {"tm": _stage_report(fit, tm_se)},
        "icc": {
            "control": float(np.tanh(fit.theta.alpha[0])),
            "treated": float(np.tanh(fit.theta.alpha.sum())),
        },
    }
    if fit.psee is not None:
        report["stages"]["psm"] = _stage_report(fit.psee)
    if fit.omee is not None:
        report["stages"]["om"] = _stage_report(fit.omee)
    if chains_report is not None:
        report["chains"] = chains_report
    out = _outdir(args)
    path = out / "fit.json"
    path.write_text(json.dumps(report, indent=2))
    print(json.dumps(report["stages"]["tm"]["estimates"], indent=2))
    if not fit.converged:
        return EXIT_CONVERGENCE
    return EXIT_OK


def bench_command(args) -> int:
    cp = _read_config(args.config)
    b = cp["bench"] if cp.has_section("bench") else {}
    sizes = tuple(
        int(v)
        for v in _labels(getattr(args, "sizes", None) or b.get("sizes", "50,100,200,400"))
    )
    structures = _labels(b.get("structures", ",".join(STRUCTURES)))
    repetitions = int(b.get("repetitions", 20))
    report = bench_grid(
        sizes=sizes, structures=structures, repetitions=repetitions,
        seed=int(args.seed or 0),
    )
    out = _outdir(args)
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["structure", "solver", "portion", "n", "median_seconds"])
        for row in report.rows:
            writer.writerow(
                [row.structure, row.solver, row.portion, row.n, row.median_seconds]
            )
    slopes = {
        f"{s}/{sol}/{portion}": v
        for (s, sol, portion), v in sorted(report.slopes.items())
    }
    (out / "bench_slopes.json").write_text(
        json.dumps({"provenance": _provenance(args, cp), "slopes": slopes}, indent=2)
    )
    print(json.dumps(slopes, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgee2",
        description="Treatment-specific means and intraclass correlations "
        "for cluster-randomized binary trials with missing outcomes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--output", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common])
    sim.add_argument("--method", choices=("parzen", "random_intercept"))
    sim.add_argument("--clusters", type=int)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--estimators", help="comma list: cc,ipw_g1,ipw_g2,dr")
    sim.add_argument(
        "--solver",
        choices=("deterministic", "stochastic", "parallel_stochastic"),
    )
    sim.add_argument("--pi-s", dest="pi_s", type=float)
    sim.add_argument("--omega-tm", dest="omega_tm", type=int)
    sim.add_argument("--omega-nuisance", dest="omega_nuisance", type=int)
    sim.add_argument("--chains", type=int)
    sim.set_defaults(func=simulate_command)

    fit = sub.add_parser("fit", parents=[common])
    fit.add_argument("input", help="long-format CSV")
    fit.add_argument("--estimator", choices=tuple(_KIND_ALIASES))
    fit.add_argument(
        "--solver",
        choices=("deterministic", "stochastic", "parallel_stochastic"),
    )
    fit.add_argument("--pi-s", dest="pi_s", type=float)
    fit.add_argument("--omega-tm", dest="omega_tm", type=int)
    fit.add_argument("--omega-nuisance", dest="omega_nuisance", type=int)
    fit.add_argument("--chains", type=int)
    fit.set_defaults(func=fit_command)

    tru = sub.add_parser("truth", parents=[common])
    tru.add_argument("--method", choices=("parzen", "random_intercept"))
    tru.add_argument("--clusters", type=int)
    tru.set_defaults(func=truth_command)

    ben = sub.add_parser("bench", parents=[common])
    ben.add_argument("--sizes", help="comma list of cluster sizes")
    ben.set_defaults(func=bench_command)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads > 0:
        try:
            import numba

            numba.set_num_threads(args.threads)
        except (ImportError, ValueError):
            pass
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, AggregateChainFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except Sgee2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
