"""Scenario-driven command line front end.

Commands: classify | simulate | backward | boundary | report-merge.
Configs are flat INI-style documents with [model], [scenario] and [test]
sections; unknown keys fail fast.  Exit codes: 0 success, 2 config error,
3 analytic precondition failure, 4 resource cap.
"""
from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analytics, backward_tree, stats
from .cluster_models import (
    FiniteAtoms,
    Fixed,
    Gaussian,
    GeometricCount,
    IIDCluster,
    InvalidModelError,
    PoissonCount,
    PopulationCapError,
    TwoPoint,
    UnitTimeBBM,
)
from .simulator import (
    ScenarioConfig,
    WindowInfeasibleError,
    run_scenario,
    window_for,
    write_generations_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_RESOURCE = 4


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {"kind", "count", "count_param", "disp", "disp_params", "bbm_drift"}
_SCENARIO_KEYS = {
    "lambda", "c_mult", "n_gens", "obs_lo", "obs_hi", "eps_trunc", "eps_prune",
    "seed", "replicates",
    # optional extras: explicit seeding window and histogram resolution
    "seed_lo", "seed_hi", "bins",
}
_TEST_KEYS = {
    "n_max", "a", "samples", "eps_prune",          # backward
    "n_list", "reps", "window", "negative_control",  # boundary
}


def _read_config(path):
    parser = configparser.ConfigParser()
    loaded = parser.read(path)
    if not loaded:
        raise ConfigError(f"cannot read config file {path}")
    known = {"model": _MODEL_KEYS, "scenario": _SCENARIO_KEYS, "test": _TEST_KEYS}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in known[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    return parser


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def build_model(cfg):
    if "model" not in cfg:
        raise ConfigError("missing [model] section")
    section = cfg["model"]
    kind = section.get("kind", "").strip().lower()
    if kind == "bbm":
        if "bbm_drift" not in section:
            raise ConfigError("bbm model needs model.bbm_drift")
        return UnitTimeBBM(float(section["bbm_drift"]))
    if kind != "iid":
        raise ConfigError(f"model.kind must be 'iid' or 'bbm', got {kind!r}")
    count_kind = section.get("count", "").strip().lower()
    param = section.get("count_param")
    if param is None:
        raise ConfigError("iid model needs model.count_param")
    if count_kind == "fixed":
        count = Fixed(int(float(param)))
    elif count_kind == "poisson":
        count = PoissonCount(float(param))
    elif count_kind == "geometric":
        count = GeometricCount(float(param))
    else:
        raise ConfigError(f"model.count must be fixed|poisson|geometric, got {count_kind!r}")
    disp_kind = section.get("disp", "").strip().lower()
    params = section.get("disp_params", "")
    if disp_kind == "gaussian":
        vals = _floats(params)
        if len(vals) != 2:
            raise ConfigError("gaussian disp_params must be 'mean,variance'")
        disp = Gaussian(vals[0], vals[1])
    elif disp_kind == "twopoint":
        vals = _floats(params)
        if len(vals) != 3:
            raise ConfigError("twopoint disp_params must be 'a,b,p'")
        disp = TwoPoint(vals[0], vals[1], vals[2])
    elif disp_kind == "atoms":
        atoms = []
        for chunk in params.split(","):
            if not chunk.strip():
                continue
            v, _, p = chunk.partition(":")
            atoms.append((float(v), float(p)))
        disp = FiniteAtoms(tuple(atoms))
    else:
        raise ConfigError(f"model.disp must be gaussian|twopoint|atoms, got {disp_kind!r}")
    return IIDCluster(count, disp)


def build_scenario(cfg, model, seed_override=None):
    if "scenario" not in cfg:
        raise ConfigError("missing [scenario] section")
    s = cfg["scenario"]
    try:
        lam = float(s["lambda"])
        n_gens = int(s["n_gens"])
        obs = (float(s["obs_lo"]), float(s["obs_hi"]))
        eps_trunc = float(s.get("eps_trunc", "1e-3"))
        eps_prune = float(s.get("eps_prune", "0"))
        c_mult = float(s.get("c_mult", "1"))
        seed = int(s["seed"]) if seed_override is None else int(seed_override)
        replicates = int(s.get("replicates", "1"))
        bins = int(s.get("bins", "50"))
    except KeyError as exc:
        raise ConfigError(f"missing scenario key {exc}") from exc
    if "seed_lo" in s or "seed_hi" in s:
        if not ("seed_lo" in s and "seed_hi" in s):
            raise ConfigError("seed_lo and seed_hi must be given together")
        window = (float(s["seed_lo"]), float(s["seed_hi"]))
    else:
        lam_eff = abs(lam) if lam != 0 else lam
        if lam_eff == 0:
            raise ConfigError("lambda = 0 scenarios need an explicit seed window")
        window = window_for(model if lam >= 0 else _mirrored(model), lam_eff,
                            c_mult, n_gens, obs if lam >= 0 else (-obs[1], -obs[0]),
                            eps_trunc)
        if lam < 0:
            window = (-window[1], -window[0])
    try:
        return ScenarioConfig(
            model=model, lam=lam, n_gens=n_gens, obs_window=obs,
            seed_window=window, rng_seed=seed, replicates=replicates,
            c_mult=c_mult, eps_trunc=eps_trunc, eps_prune=eps_prune, bins=bins,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _mirrored(model):
    from .cluster_models import mirror

    return mirror(model)


def echo_config(config: ScenarioConfig, model_section) -> str:
    """Round-trippable INI echo of the scenario as originally configured."""
    lines = ["[model]"]
    for key in sorted(model_section):
        lines.append(f"{key} = {model_section[key]}")
    lines.append("")
    lines.append("[scenario]")
    lines.append(f"lambda = {config.lam!r}")
    lines.append(f"c_mult = {config.c_mult!r}")
    lines.append(f"n_gens = {config.n_gens}")
    lines.append(f"obs_lo = {config.obs_window[0]!r}")
    lines.append(f"obs_hi = {config.obs_window[1]!r}")
    lines.append(f"seed_lo = {config.seed_window[0]!r}")
    lines.append(f"seed_hi = {config.seed_window[1]!r}")
    lines.append(f"eps_trunc = {config.eps_trunc!r}")
    lines.append(f"eps_prune = {config.eps_prune!r}")
    lines.append(f"seed = {config.rng_seed}")
    lines.append(f"replicates = {config.replicates}")
    lines.append(f"bins = {config.bins}")
    return "\n".join(lines) + "\n"


def cmd_classify(args):
    cfg = _read_config(args.config)
    model = build_model(cfg)
    profile = analytics.laplace_profile(model)
    print(f"brwlab {__version__} classify")
    print(f"phi(0) = {analytics.log_laplace(model, 0.0):.12g}  ({profile.criticality})")
    if not profile.roots:
        print("roots: none  (no exponential equilibrium intensity)")
    else:
        print(f"roots: {', '.join(f'{r:.12g}' for r in profile.roots)}")
        for r in profile.roots:
            c = analytics.classify(model, r)
            print(f"  lambda = {r:.12g}: phi' = {analytics.phi_prime(model, r):.12g}, "
                  f"lambda*phi' = {c.product:.12g}, verdict = {c.verdict}")
    fs = profile.front_speed
    print(f"front speed = {'-inf' if math.isinf(fs) and fs < 0 else f'{fs:.12g}'}")
    if profile.persistent_roots:
        print(f"persistent roots: {', '.join(f'{r:.12g}' for r in profile.persistent_roots)}")
    else:
        print("persistent roots: none")
    return EXIT_OK


def cmd_simulate(args):
    cfg = _read_config(args.config)
    model = build_model(cfg)
    config = build_scenario(cfg, model, args.seed_override)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    result = run_scenario(config, jobs=args.jobs)
    elapsed = time.time() - t0
    write_generations_csv(result, out / "generations.csv")

    run_config = result.config
    lines = [f"brwlab {__version__} simulate", f"rng_seed = {run_config.rng_seed}", ""]
    lines.append("-- config echo --")
    lines.append(echo_config(config, cfg["model"]))
    lines.append("-- classification --")
    try:
        c = analytics.classify(run_config.model, run_config.lam)
        lines.append(f"lambda = {run_config.lam!r} ({'mirrored' if run_config.mirrored else 'as configured'}): "
                     f"product = {c.product:.6g}, verdict = {c.verdict}")
    except analytics.NonRootError as exc:
        lines.append(f"lambda = {run_config.lam!r}: not a root ({exc})")
    bound = analytics.truncation_bound(
        run_config.model, run_config.lam, run_config.c_mult,
        run_config.seed_window[0], run_config.n_gens, run_config.obs_window[0],
    ) if run_config.lam > 0 else math.nan
    certified = bound <= run_config.eps_trunc / 2
    lines.append(f"seed window = {run_config.seed_window}, truncation bound = {bound:.3g} "
                 f"({'certified' if certified else 'NOT certified for eps_trunc'})")
    lines.append("")
    lines.append("-- per-generation means over replicates --")
    lines.append("gen,mean_count_in_obs,mean_max_pos")
    n_reps = len(result.replicates)
    for g in range(run_config.n_gens + 1):
        counts = [rep[g].count_in_obs for rep in result.replicates]
        maxes = [rep[g].max_pos for rep in result.replicates if rep[g].max_pos is not None]
        mean_max = f"{np.mean(maxes):.6g}" if maxes else ""
        lines.append(f"{g},{np.mean(counts):.6g},{mean_max}")
    lines.append("")
    total = sum(s.count_in_obs for rep in result.replicates for s in rep)
    lines.append(f"replicates = {n_reps}, wall_clock_s = {elapsed:.2f}, "
                 f"total_obs_counts = {total}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'generations.csv'} and {out / 'report.txt'}")
    return EXIT_OK


def cmd_backward(args):
    cfg = _read_config(args.config)
    model = build_model(cfg)
    if "test" not in cfg:
        raise ConfigError("backward needs a [test] section (n_max, a, samples)")
    t = cfg["test"]
    try:
        n_max = int(t["n_max"])
        a = float(t["a"])
        samples = int(t["samples"])
    except KeyError as exc:
        raise ConfigError(f"missing test key {exc}") from exc
    eps_prune = float(t.get("eps_prune", "0.05"))
    if "scenario" not in cfg or "lambda" not in cfg["scenario"]:
        raise ConfigError("backward needs scenario.lambda")
    lam = float(cfg["scenario"]["lambda"])
    seed = int(cfg["scenario"].get("seed", "0")) if args.seed_override is None else args.seed_override
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    hits = np.zeros((samples, n_max))
    for i in range(samples):
        sample = backward_tree.sample_backward_tree(model, lam, n_max, a, rng,
                                                    eps_prune=eps_prune)
        hits[i] = sample.hits
        for level in range(n_max):
            rows.append((i, level + 1, sample.ancestor_positions[level],
                         sample.sibling_counts[level], sample.hit_counts[level],
                         int(sample.hits[level])))
    rng_verdict = np.random.Generator(np.random.Philox(key=int(seed)).jumped(1))
    report = backward_tree.stability_diagnostic(model, lam, n_max, a, samples,
                                                rng_verdict, eps_prune=eps_prune)
    with open(out / "backward.csv", "w", encoding="utf-8") as f:
        f.write("sample_id,n,s_n,k_n,rho_n_count,hit_n\n")
        for r in rows:
            count = "" if math.isnan(r[4]) else str(int(r[4]))
            f.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]},{count},{r[5]}\n")
    verdict_line = (f"verdict = {report.verdict}, decay_slope = {report.decay_slope:.4g}, "
                    f"truncated_fraction = {report.truncated_fraction:.3g}")
    (out / "report.txt").write_text(
        f"brwlab {__version__} backward\nrng_seed = {seed}\n{verdict_line}\n", encoding="utf-8")
    print(verdict_line)
    return EXIT_OK


def cmd_boundary(args):
    cfg = _read_config(args.config)
    model = build_model(cfg)
    if not isinstance(model, UnitTimeBBM):
        raise analytics.OutOfDomainError("boundary test requires a bbm model")
    t = cfg["test"] if "test" in cfg else {}
    negative_control = str(t.get("negative_control", "false")).strip().lower() == "true"
    boundary_drift = -math.sqrt(2.0)
    if abs(model.drift - boundary_drift) > 1e-9 and not negative_control:
        raise analytics.OutOfDomainError(
            "boundary test is pinned to drift -sqrt(2); set test.negative_control = true to override"
        )
    n_list = [int(float(x)) for x in str(t.get("n_list", "5,10,15,20,25")).split(",")]
    reps = int(t.get("reps", "400"))
    window = float(t.get("window", "10"))
    seed = 0
    if "scenario" in cfg and "seed" in cfg["scenario"]:
        seed = int(cfg["scenario"]["seed"])
    if args.seed_override is not None:
        seed = args.seed_override
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    tilt = -model.drift
    report = stats.boundary_decay_test(n_list, reps, rng, drift=model.drift,
                                       t=tilt, window=window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"brwlab {__version__} boundary", f"rng_seed = {seed}",
             f"drift = {model.drift!r}, t = {tilt!r}, reps = {reps}, window = {window}"]
    for e in report.estimates:
        lines.append(f"n = {e.n}: estimate = {e.value:.6g}  ci = [{e.ci_lo:.6g}, {e.ci_hi:.6g}]")
    lines.append(f"verdict = {report.verdict}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(lines[-1])
    return EXIT_OK


def cmd_report_merge(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = None
    rows = []
    for path in args.files:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines:
            raise ConfigError(f"{path} is empty")
        if header is None:
            header = lines[0]
        elif lines[0] != header:
            raise ConfigError(f"{path} header does not match the first file")
        rows.extend(lines[1:])
    (out / "merged.csv").write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    print(f"wrote {out / 'merged.csv'} ({len(rows)} rows)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="brwlab", description=__doc__)
    parser.add_argument("command",
                        choices=["classify", "simulate", "backward", "boundary", "report-merge"])
    parser.add_argument("files", nargs="*", help="CSV files (report-merge only)")
    parser.add_argument("--config", type=str, default=None, help="scenario config path")
    parser.add_argument("--out", type=str, default=".", help="output directory")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker pool width for replicates")
    parser.add_argument("--seed-override", type=int, default=None, dest="seed_override")
    args = parser.parse_args(argv)

    handlers = {
        "classify": cmd_classify,
        "simulate": cmd_simulate,
        "backward": cmd_backward,
        "boundary": cmd_boundary,
        "report-merge": cmd_report_merge,
    }
    if args.command != "report-merge" and args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return handlers[args.command](args)
    except (ConfigError, configparser.Error, InvalidModelError, ValueError) as exc:
        if isinstance(exc, (analytics.NonRootError, analytics.OneSidedIntensityError,
                            analytics.OutOfDomainError)):
            print(f"precondition error: {exc}", file=sys.stderr)
            return EXIT_PRECONDITION
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (analytics.NonRootError, analytics.OneSidedIntensityError,
            analytics.OutOfDomainError) as exc:
        print(f"precondition error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (PopulationCapError, WindowInfeasibleError) as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
