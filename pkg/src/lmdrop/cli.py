"""Command-line front end.

Subcommands: ``fit``, ``select-k``, ``lr-test``, ``simulate``, ``audit``.
Model, stopping-rule, and simulation settings come from small YAML files;
results land in an output directory as machine-readable ``results.json``
(sorted keys, no timestamps, embeds the resolved configuration, so a rerun
on the same inputs is byte-identical), a human-readable ``results.txt``, and
``fit_log.json`` with per-iteration and per-start detail.

Exit codes: 0 success; 2 bad input (schema, config, or data problems);
3 fitting failure; 4 fit succeeded but the information matrix was singular
(results are still written, without standard errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import (
    ChannelColumns,
    PanelSchema,
    center_continuous,
    dropout_summary,
    load_panel,
    write_panel,
)
from .em import EmConfig, FitResult, deterministic_init, multistart_fit
from .exceptions import (
    ExplosionError,
    LmdropError,
    SchemaError,
    ShapeError,
    SingularInformationError,
)
from .inference import bic, lr_test_dropout, oakes_information, wald_table
from .model import (
    ChannelSpec,
    ModelSpec,
    ParamSet,
    num_params,
    pack_params,
    unpack_params,
)
from .oracle import brute_loglik, brute_posteriors
from .recursions import posteriors as subject_posteriors
from .recursions import subject_loglik
from .simulate import (
    BinaryCovariate,
    ConstantCovariate,
    SimConfig,
    TimePolynomial,
    UniformCovariate,
    simulate,
)

INPUT_EXIT = 2
FIT_EXIT = 3
SE_EXIT = 4


# ---------------------------------------------------------------------------
# config parsing


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise SchemaError(f"{where}: missing required key {key!r}")
    return mapping[key]


def _load_yaml(path: str, where: str) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError:
        raise SchemaError(f"{where}: file not found: {path}")
    except yaml.YAMLError as err:
        raise SchemaError(f"{where}: not valid YAML: {err}")
    if not isinstance(cfg, dict):
        raise SchemaError(f"{where}: top level must be a mapping")
    return cfg


def _parse_model_config(cfg: dict):
    """Model YAML -> (PanelSchema, n_states, hazard kwargs, center list)."""
    channels = []
    for entry in _require(cfg, "channels", "model config"):
        channels.append(
            ChannelColumns(
                name=_require(entry, "name", "channel entry"),
                family=_require(entry, "family", "channel entry"),
                covariates=tuple(entry.get("covariates", ())),
            )
        )
    hazard = cfg.get("hazard", {}) or {}
    schema = PanelSchema(
        channels=tuple(channels),
        hazard_covariates=tuple(hazard.get("covariates", ())),
        subject_col=cfg.get("subject_col", "subject"),
        occasion_col=cfg.get("occasion_col", "occasion"),
        horizon=cfg.get("horizon"),
    )
    n_states = int(_require(cfg, "states", "model config"))
    hazard_kwargs = {
        "hazard_link": hazard.get("link", "logit"),
        "share_gamma": bool(hazard.get("share_gamma", False)),
    }
    center = list(cfg.get("center", ()))
    return schema, n_states, hazard_kwargs, center


def _parse_em_config(path: str | None, args) -> EmConfig:
    cfg = _load_yaml(path, "em config") if path else {}
    known = {f.name for f in dataclasses.fields(EmConfig)}
    unknown = set(cfg) - known
    if unknown:
        raise SchemaError(f"em config: unknown keys {sorted(unknown)}")
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["n_jobs"] = args.threads
    elif "n_jobs" not in cfg:
        # starts run across available cores unless pinned; the winner does
        # not depend on scheduling, only on the seed
        cfg["n_jobs"] = -1
    return EmConfig(**cfg)


_GENERATORS = {
    "constant": ConstantCovariate,
    "uniform": UniformCovariate,
    "binary": BinaryCovariate,
    "time": TimePolynomial,
}


def _parse_sim_config(cfg: dict, seed_override: int | None) -> SimConfig:
    channels = []
    channel_names = []
    channel_cov = []
    for entry in _require(cfg, "channels", "sim config"):
        names = tuple(entry.get("covariates", ()))
        channels.append(
            ChannelSpec(
                family=_require(entry, "family", "sim channel"),
                n_covariates=len(names),
            )
        )
        channel_names.append(_require(entry, "name", "sim channel"))
        channel_cov.append(names)
    hazard = cfg.get("hazard", {}) or {}
    hazard_cov = tuple(hazard.get("covariates", ()))
    spec = ModelSpec(
        n_states=int(_require(cfg, "states", "sim config")),
        channels=tuple(channels),
        n_hazard_covariates=len(hazard_cov),
        hazard_link=hazard.get("link", "logit"),
        share_gamma=bool(hazard.get("share_gamma", False)),
    )
    generators = {}
    for name, g in (cfg.get("covariates") or {}).items():
        kind = _require(g, "kind", f"covariate {name!r}")
        if kind not in _GENERATORS:
            raise SchemaError(f"covariate {name!r}: unknown kind {kind!r}")
        kwargs = {kk: v for kk, v in g.items() if kk != "kind"}
        try:
            generators[name] = _GENERATORS[kind](**kwargs)
        except TypeError as err:
            raise SchemaError(f"covariate {name!r}: {err}")
    p = _require(cfg, "params", "sim config")
    sigma2 = [math.nan if v is None else float(v)
              for v in p.get("sigma2", [math.nan] * spec.r)]
    params = ParamSet(
        init_probs=np.asarray(_require(p, "init_probs", "sim params"), float),
        trans=np.asarray(_require(p, "trans", "sim params"), float),
        intercepts=np.asarray(_require(p, "intercepts", "sim params"), float),
        slopes=tuple(
            np.asarray(row, float) for row in _require(p, "slopes", "sim params")
        ),
        sigma2=np.asarray(sigma2, float),
        hazard_intercepts=np.asarray(
            _require(p, "hazard_intercepts", "sim params"), float
        ),
        hazard_slopes=np.asarray(p.get("hazard_slopes", ()), float),
    )
    seed = cfg.get("seed", 0) if seed_override is None else seed_override
    return SimConfig(
        spec=spec,
        params=params,
        n_subjects=int(_require(cfg, "n_subjects", "sim config")),
        horizon=int(_require(cfg, "horizon", "sim config")),
        covariates=generators,
        channel_covariates=tuple(channel_cov),
        hazard_covariates=hazard_cov,
        channel_names=tuple(channel_names),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    """Make an object JSON-safe; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(kk): _clean(v) for kk, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _report_rows(info) -> list[dict]:
    return [
        {"label": row.label, "estimate": row.estimate, "se": row.se, "t": row.t}
        for row in wald_table(info)
    ]


def _format_table(rows: list[dict]) -> str:
    width = max((len(r["label"]) for r in rows), default=5)
    lines = [f"{'parameter':<{width}}  {'estimate':>12}  {'se':>12}  {'t':>8}"]
    for r in rows:
        se = f"{r['se']:12.4f}" if r.get("se") is not None else " " * 12
        t = f"{r['t']:8.2f}" if r.get("t") is not None else " " * 8
        lines.append(f"{r['label']:<{width}}  {r['estimate']:12.4f}  {se}  {t}")
    return "\n".join(lines)


def _fit_summary(result: FitResult, data, spec: ModelSpec) -> dict:
    return {
        "n_subjects": data.n,
        "horizon": data.horizon,
        "n_states": spec.k,
        "n_params": num_params(spec),
        "loglik": result.loglik,
        "bic": bic(result.loglik, spec, data.n),
        "converged": result.converged,
        "n_iter": result.n_iter,
        "start_index": result.start_index,
        "failure": result.failure,
        "packed": pack_params(result.params, spec).tolist(),
    }


def _write_fit_outputs(outdir: Path, payload: dict, text: str, logs: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "results.json", payload)
    (outdir / "results.txt").write_text(text + "\n")
    _write_json(outdir / "fit_log.json", logs)


def _resolved_model(schema: PanelSchema, n_states, hazard_kwargs, center, data) -> dict:
    """Model configuration with every default materialised."""
    return {
        "states": n_states,
        "subject_col": schema.subject_col,
        "occasion_col": schema.occasion_col,
        "horizon": data.horizon,
        "channels": [
            {"name": c.name, "family": c.family, "covariates": list(c.covariates)}
            for c in schema.channels
        ],
        "hazard": {
            "covariates": list(schema.hazard_covariates),
            "link": hazard_kwargs["hazard_link"],
            "share_gamma": hazard_kwargs["share_gamma"],
        },
        "center": list(center),
    }


def _load_fit_data(args):
    model_cfg = _load_yaml(args.model, "model config")
    schema, n_states, hazard_kwargs, center = _parse_model_config(model_cfg)
    data = load_panel(args.data, schema)
    centering = None
    if center:
        data, report = center_continuous(data, center)
        centering = {name: mean for name, mean in report.means.items()}
    spec = schema.model_spec(n_states, **hazard_kwargs)
    resolved = _resolved_model(schema, n_states, hazard_kwargs, center, data)
    return resolved, schema, data, spec, centering


# ---------------------------------------------------------------------------
# subcommands


def _cmd_fit(args) -> int:
    model_cfg, schema, data, spec, centering = _load_fit_data(args)
    em_config = _parse_em_config(args.em, args)
    result = multistart_fit(data, spec, em_config)

    exit_code = 0
    info = None
    se_note = None
    if result.failure is not None:
        # the winning start aborted mid-run; its parameters are the last
        # coherent iterate, so standard errors there would mislead
        exit_code = FIT_EXIT
        se_note = f"fit failed, standard errors skipped: {result.failure}"
    elif not args.no_se:
        try:
            info = oakes_information(
                data, result.params, spec, fd_step=args.fd_step,
                names=data.report_names(),
            )
        except SingularInformationError as err:
            info = err.result
            se_note = str(err)
            exit_code = SE_EXIT
    drop = dropout_summary(data)
    payload = {
        "command": "fit",
        "version": _version(),
        "config": {"model": model_cfg, "em": dataclasses.asdict(em_config)},
        "centering": centering,
        "dropout_fractions": drop.fractions,
        "se_note": se_note,
        "report": _report_rows(info) if info is not None else None,
        **_fit_summary(result, data, spec),
    }
    lines = [
        f"fit: {spec.k} states, {num_params(spec)} parameters, "
        f"{data.n} subjects, horizon {data.horizon}",
        f"loglik {result.loglik:.4f}   bic {payload['bic']:.4f}   "
        f"converged {result.converged} in {result.n_iter} iterations",
    ]
    if se_note:
        lines.append(f"warning: {se_note}")
    if info is not None:
        lines += ["", _format_table(_report_rows(info))]
    logs = {
        "trace": result.trace.tolist(),
        "start_logliks": list(result.start_logliks),
        "start_index": result.start_index,
        "seed": em_config.seed,
    }
    _write_fit_outputs(Path(args.out), payload, "\n".join(lines), logs)
    return exit_code


def _parse_k_range(text: str) -> list[int]:
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise SchemaError("--k-range must look like 1:4")
    if lo < 1 or hi < lo:
        raise SchemaError("--k-range must satisfy 1 <= low <= high")
    return list(range(lo, hi + 1))


def _cmd_select_k(args) -> int:
    model_cfg, schema, data, spec, centering = _load_fit_data(args)
    em_config = _parse_em_config(args.em, args)
    ks = _parse_k_range(args.k_range)
    rows = []
    fits: dict[int, FitResult] = {}
    for kk in ks:
        spec_k = dataclasses.replace(spec, n_states=kk)
        try:
            fit_k = multistart_fit(data, spec_k, em_config)
        except FitError as err:
            rows.append({"k": kk, "n_params": num_params(spec_k), "loglik": None,
                         "bic": None, "converged": False, "error": str(err)})
            continue
        fits[kk] = fit_k
        rows.append(
            {
                "k": kk,
                "n_params": num_params(spec_k),
                "loglik": fit_k.loglik,
                "bic": bic(fit_k.loglik, spec_k, data.n),
                "converged": fit_k.converged,
                "error": None,
            }
        )
    scored = [r for r in rows if r["bic"] is not None]
    if not scored:
        raise FitError("no candidate state count could be fitted")
    selected = min(scored, key=lambda r: (r["bic"], r["k"]))["k"]
    payload = {
        "command": "select-k",
        "version": _version(),
        "config": {"model": model_cfg, "em": dataclasses.asdict(em_config)},
        "centering": centering,
        "n_subjects": data.n,
        "candidates": rows,
        "selected_k": selected,
        "selected_packed": pack_params(
            fits[selected].params, dataclasses.replace(spec, n_states=selected)
        ).tolist(),
    }
    lines = [f"{'k':>3}  {'params':>6}  {'loglik':>14}  {'bic':>14}"]
    for r in rows:
        if r["bic"] is None:
            lines.append(f"{r['k']:>3}  {r['n_params']:>6}  {'failed':>14}  {'':>14}")
            continue
        mark = " *" if r["k"] == selected else ""
        lines.append(
            f"{r['k']:>3}  {r['n_params']:>6}  {r['loglik']:>14.4f}  "
            f"{r['bic']:>14.4f}{mark}"
        )
    lines.append(f"selected k = {selected} (lowest bic)")
    logs = {
        str(kk): {"trace": fits[kk].trace.tolist(),
                  "start_logliks": list(fits[kk].start_logliks)}
        for kk in fits
    }
    _write_fit_outputs(Path(args.out), payload, "\n".join(lines), logs)
    return 0


def _cmd_lr_test(args) -> int:
    model_cfg, schema, data, spec, centering = _load_fit_data(args)
    em_config = _parse_em_config(args.em, args)
    spec_null = dataclasses.replace(spec, share_gamma=True)
    spec_free = dataclasses.replace(spec, share_gamma=False)
    fit_null = multistart_fit(data, spec_null, em_config)
    # seed the unconstrained fit with the null solution so nesting holds
    seed_params = dataclasses.replace(
        fit_null.params,
        hazard_intercepts=np.repeat(fit_null.params.hazard_intercepts, spec.k),
    )
    fit_free = multistart_fit(data, spec_free, em_config, extra_inits=(seed_params,))
    report = lr_test_dropout(fit_free, fit_null)

    exit_code = 0
    info = None
    se_note = None
    failed = fit_free.failure or fit_null.failure
    if failed:
        exit_code = FIT_EXIT
        se_note = f"fit failed, standard errors skipped: {failed}"
    elif not args.no_se:
        try:
            info = oakes_information(
                data, fit_free.params, spec_free, fd_step=args.fd_step,
                names=data.report_names(),
            )
        except SingularInformationError as err:
            info = err.result
            se_note = str(err)
            exit_code = SE_EXIT
    payload = {
        "command": "lr-test",
        "version": _version(),
        "config": {"model": model_cfg, "em": dataclasses.asdict(em_config)},
        "centering": centering,
        "test": {
            "statistic": report.statistic,
            "df": report.df,
            "p_value": report.p_value,
            "loglik_free": report.loglik_free,
            "loglik_null": report.loglik_null,
        },
        "free": _fit_summary(fit_free, data, spec_free),
        "null": _fit_summary(fit_null, data, spec_null),
        "se_note": se_note,
        "report": _report_rows(info) if info is not None else None,
    }
    lines = [
        "informative drop-out test (state-specific vs shared hazard intercepts)",
        f"loglik free {report.loglik_free:.4f}   null {report.loglik_null:.4f}",
        f"LR {report.statistic:.4f} on {report.df} df   p = {report.p_value:.3g}",
    ]
    if se_note:
        lines.append(f"warning: {se_note}")
    if info is not None:
        lines += ["", _format_table(_report_rows(info))]
    logs = {
        "free": {"trace": fit_free.trace.tolist(),
                 "start_logliks": list(fit_free.start_logliks)},
        "null": {"trace": fit_null.trace.tolist(),
                 "start_logliks": list(fit_null.start_logliks)},
    }
    _write_fit_outputs(Path(args.out), payload, "\n".join(lines), logs)
    return exit_code


def _cmd_simulate(args) -> int:
    cfg = _load_yaml(args.config, "sim config")
    sim_config = _parse_sim_config(cfg, args.seed)
    data, truth = simulate(sim_config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_panel(data, outdir / "panel.csv")
    _write_json(
        outdir / "truth.json",
        {
            "paths": truth.paths.tolist(),
            "exit_occasions": truth.exit_occasions.tolist(),
            "seed": truth.seed,
            "packed": pack_params(sim_config.params, sim_config.spec).tolist(),
        },
    )
    drop = dropout_summary(data)
    _write_json(
        outdir / "results.json",
        {
            "command": "simulate",
            "version": _version(),
            "config": cfg,
            "seed": sim_config.seed,
            "n_subjects": data.n,
            "horizon": data.horizon,
            "dropout_fractions": drop.fractions,
        },
    )
    print(f"wrote {data.n} subjects to {outdir / 'panel.csv'}")
    return 0


def _cmd_audit(args) -> int:
    model_cfg, schema, data, spec, centering = _load_fit_data(args)
    if args.params:
        try:
            with open(args.params) as fh:
                packed = json.load(fh)["packed"]
        except FileNotFoundError:
            raise SchemaError(f"params file not found: {args.params}")
        except (json.JSONDecodeError, KeyError):
            raise SchemaError(
                f"params file {args.params} must be a results.json with a "
                "'packed' entry"
            )
        params = unpack_params(np.asarray(packed, float), spec)
    else:
        params = deterministic_init(data, spec)

    worst_loglik = 0.0
    worst_post = 0.0
    for rec in data.subjects:
        ll_fast = subject_loglik(rec, params, spec, data.horizon)
        ll_brute = brute_loglik(rec, params, spec, data.horizon)
        worst_loglik = max(worst_loglik, abs(ll_fast - ll_brute))
        post_fast = subject_posteriors(rec, params, spec, data.horizon)
        post_brute = brute_posteriors(rec, params, spec, data.horizon)
        worst_post = max(
            worst_post,
            float(np.max(np.abs(post_fast.state_marginals - post_brute.state_marginals))),
        )
        if post_fast.pair_marginals is not None:
            worst_post = max(
                worst_post,
                float(np.max(np.abs(post_fast.pair_marginals - post_brute.pair_marginals))),
            )
    ok = worst_loglik < args.tol and worst_post < args.tol
    payload = {
        "command": "audit",
        "version": _version(),
        "config": {"model": model_cfg},
        "params_source": args.params or "deterministic-init",
        "n_subjects": data.n,
        "max_abs_loglik_diff": worst_loglik,
        "max_abs_posterior_diff": worst_post,
        "tolerance": args.tol,
        "ok": ok,
    }
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        _write_json(outdir / "audit.json", payload)
    print(
        f"audit {'ok' if ok else 'FAILED'}: max |loglik diff| {worst_loglik:.3e}, "
        f"max |posterior diff| {worst_post:.3e} over {data.n} subjects"
    )
    return 0 if ok else FIT_EXIT


# ---------------------------------------------------------------------------
# argument parsing


def _version() -> str:
    from . import __version__

    return __version__


def _add_common(p, em=True):
    p.add_argument("--data", required=True, help="panel CSV path")
    p.add_argument("--model", required=True, help="model YAML path")
    if em:
        p.add_argument("--em", help="stopping-rule YAML path")
        p.add_argument("--seed", type=int, help="override the multistart seed")
        p.add_argument("--threads", type=int, help="parallel starts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmdrop",
        description="latent Markov models of longitudinal outcomes with "
        "informative drop-out",
    )
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model by multistart EM")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--no-se", action="store_true", help="skip standard errors")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("select-k", help="compare state counts by BIC")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--k-range", required=True, help="inclusive range, e.g. 1:4")
    p.set_defaults(func=_cmd_select_k)

    p = sub.add_parser("lr-test", help="test informative drop-out")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--no-se", action="store_true")
    p.set_defaults(func=_cmd_lr_test)

    p = sub.add_parser("simulate", help="draw a synthetic panel")
    p.add_argument("--config", required=True, help="simulation YAML path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser(
        "audit", help="check the recursions against path enumeration"
    )
    _add_common(p, em=False)
    p.add_argument("--params", help="results.json holding packed parameters")
    p.add_argument("--out", help="optional output directory")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=_cmd_audit)
    return parser


_INPUT_ERRORS = (SchemaError, ShapeError, ExplosionError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return INPUT_EXIT
    except SingularInformationError as err:
        print(f"error: {err}", file=sys.stderr)
        return SE_EXIT
    except LmdropError as err:
        print(f"error: {err}", file=sys.stderr)
        return FIT_EXIT


if __name__ == "__main__":
    sys.exit(main())
