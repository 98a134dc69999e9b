"""``cmj`` command line."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import __version__
from .characteristics import parse_characteristic
from .embedding import embedded_spectral_check, key_identity_check
from .genealogy import DEFAULT_CAP, Generations, Horizon, generation_sizes, simulate
from .harness import PreconditionError, bundled_suite_path, rate_experiment, ratio_experiment, run_suite, wlln_experiment
from .martingales import DEFAULT_PROXY, PROXY_COMING, PROXY_LAST_GENERATION, nerman_rate_experiment
from .model import Exponential, ModelError, parse_displacement, resolve_model, validate
from .renewal import RenewalSpec, excess_decay_experiment, excess_tail, mrp_moment_check, renewal_count_check
from .report import ExperimentReport, _clean, write_summary
from .spectral import SpectralError, malthusian
from .spine import DUALITY_FUNCTIONS, duality_check, sigma_stats, spine_law, stationary_occupation


def _grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected a,b,c") from None


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def _print(obj) -> None:
    print(json.dumps(_clean(obj), indent=2, sort_keys=True))


def _emit(rep: ExperimentReport, out: str | None) -> int:
    if out:
        rep.write(out)
        write_summary(Path(out) / "summary.csv", rep.summary_rows(rep.name))
    print(rep.body_json())
    return 0 if rep.passed else 1


def _common(p: argparse.ArgumentParser, replicates: int = 100, horizon: float | None = None) -> None:
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--replicates", type=int, default=replicates)
    p.add_argument("--horizon", type=float, default=horizon)
    p.add_argument("--type", type=int, default=1, dest="type_")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--workers", type=int, default=None, help="overrides CMJ_THREADS")
    p.add_argument("--out", default=None, help="directory for the JSON report and summary.csv")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_spectral(a) -> int:
    spec = resolve_model(a.model)
    out = malthusian(spec).to_json()
    if a.validate:
        out["validation"] = validate(spec, a.seed).to_json()
    _print(out)
    return 0


def cmd_simulate(a) -> int:
    spec = resolve_model(a.model)
    if (a.horizon is None) == (a.generations is None):
        raise ValueError("give exactly one of --horizon and --generations")
    mode = Horizon(a.horizon) if a.horizon is not None else Generations(a.generations)
    tree = simulate(spec, a.type_, mode, a.seed, replicate=a.replicate, cap=a.cap)
    if a.dump_tree:
        tree.dump(a.dump_tree)
    _print(
        {
            "model_fingerprint": spec.fingerprint(),
            "seed": a.seed,
            "replicate": a.replicate,
            "root_type": a.type_,
            "individuals": len(tree),
            "generation_sizes": generation_sizes(tree),
            "truncated": tree.truncated,
        }
    )
    return 0


def cmd_embed(a) -> int:
    spec = resolve_model(a.model)
    spectral = malthusian(spec)
    horizon = a.horizon if a.horizon is not None else 8.0 / spectral.alpha
    grid = a.grid or [horizon * k / 4 for k in range(1, 5)]
    phis = [parse_characteristic(a.phi)] if a.phi else [parse_characteristic(n) for n in ("born", "window:1", "childrenbyage")]
    worst = 0.0
    for r in range(a.replicates):
        tree = simulate(spec, a.type_, Horizon(horizon), a.seed, replicate=r, cap=a.cap, copy=False)
        for phi in phis:
            worst = max(worst, key_identity_check(tree, phi, grid)["max_deviation"])
    rep = embedded_spectral_check(spec, spectral, a.replicates, a.seed, a.type_, a.cap, a.workers)
    rep.params.update({"identity_horizon": horizon, "identity_grid": grid, "phis": [str(p) for p in phis]})
    rep.extra["key_identity_max_rel_deviation"] = worst
    rep.verdict("key_identity", worst <= 1e-9, max_rel_deviation=worst)
    return _emit(rep, a.out)


def cmd_spine(a) -> int:
    spec = resolve_model(a.model)
    spectral = malthusian(spec)
    law = spine_law(spec, spectral)
    funcs = a.duality or list(DUALITY_FUNCTIONS)
    rep = duality_check(spec, spectral, a.type_, funcs, a.replicates, a.seed, cap=a.cap, workers=a.workers)
    sig = sigma_stats(law, spectral, a.type_, max(a.replicates, 1000), a.seed)
    occ = stationary_occupation(law, spectral, a.steps, a.seed)
    rep.extra.update({"spine_law": law.to_json(), "sigma": sig, "occupation": occ})
    rep.verdict("sigma_mean", sig["sigma_pass"], mean=sig["sigma_mean"], se=sig["sigma_se"], target=sig["sigma_target"])
    rep.verdict("stationary_occupation", occ["pass"])
    return _emit(rep, a.out)


def cmd_renewal(a) -> int:
    if a.which == "excess":
        law = parse_displacement(json.loads(a.law), "--law")
        spec = RenewalSpec(law)
        grid = a.grid or [2.0, 4.0, 8.0]
        rep = excess_decay_experiment(spec, a.delta, a.a, grid, a.replicates, a.seed)
        rep.extra["renewal_count"] = renewal_count_check(spec, a.replicates, a.seed)
        if isinstance(law, Exponential):
            rate = law.rate
            tails = []
            for t in grid:
                e = excess_tail(spec, t, a.a, a.replicates, a.seed)
                e["exact"] = math.exp(-rate * a.a * t)
                e["pass"] = abs(e["estimate"] - e["exact"]) <= 4 * max(e["se"], 1e-9)
                tails.append(e)
            rep.extra["memoryless_oracle"] = tails
            rep.verdict("memoryless_tail", all(e["pass"] for e in tails))
        return _emit(rep, a.out)
    spec = resolve_model(a.model)
    out = mrp_moment_check(spec, malthusian(spec), a.type_, a.eps, a.replicates, a.seed)
    _print(out)
    return 0 if out["stable"] else 1


def cmd_verify(a) -> int:
    spec = resolve_model(a.model)
    if a.which == "nerman-rate":
        if a.horizon is None or not a.grid:
            raise ValueError("nerman-rate needs --horizon and --grid")
        rep = nerman_rate_experiment(spec, malthusian(spec), a.delta, a.grid, a.horizon, a.replicates, a.seed, a.cap, a.workers)
        return _emit(rep, a.out)
    if not a.grid:
        raise ValueError(f"{a.which} needs --grid")
    phi = parse_characteristic(a.phi)
    if a.which == "ratio":
        psi = parse_characteristic(a.psi)
        rep = ratio_experiment(spec, phi, psi, a.type_, a.grid, a.horizon, a.replicates, a.seed, a.cap, a.workers)
        return _emit(rep, a.out)
    horizon = a.horizon if a.horizon is not None else max(a.grid)
    if a.which == "wlln":
        rep = wlln_experiment(spec, phi, a.type_, a.grid, horizon, a.replicates, a.seed, a.proxy, a.cap, a.workers)
    else:
        rep = rate_experiment(spec, phi, a.type_, a.delta, a.grid, horizon, a.replicates, a.seed, a.proxy, a.cap, a.workers)
    return _emit(rep, a.out)


def cmd_suite(a) -> int:
    path = bundled_suite_path() if a.config == "quick" else Path(a.config)
    return run_suite(path, a.out, seed=a.seed, workers=a.workers, log=lambda m: print(m, file=sys.stderr))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmj", description="Multi-type general branching process experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    model_help = "model JSON path or bundled model name"

    p = sub.add_parser("spectral", help="Malthusian parameter and eigenvectors")
    p.add_argument("model", help=model_help)
    p.add_argument("--validate", action="store_true", help="include the model validation report")
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("simulate", help="simulate one tree")
    p.add_argument("model", help=model_help)
    _common(p)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--dump-tree", metavar="PATH", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("embed", help="optional-line identity and embedded spectral check")
    p.add_argument("model", help=model_help)
    _common(p, replicates=200)
    p.add_argument("--phi", default=None)
    p.add_argument("--grid", type=_grid, default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("spine", help="spine walk, return times and dualities")
    p.add_argument("model", help=model_help)
    _common(p, replicates=2000)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--duality", action="append", default=None, help="one | s | exp_neg_s | type:k (repeatable)")
    p.set_defaults(func=cmd_spine)

    p = sub.add_parser("renewal", help="renewal excess and Markov renewal moments")
    rs = p.add_subparsers(dest="which", required=True)
    q = rs.add_parser("excess", help="excess tail decay of an ordinary renewal process")
    q.add_argument("--law", default='{"kind": "exponential", "rate": 1.0}', help="inter-arrival law as displacement JSON")
    q.add_argument("--a", type=float, default=1.0)
    q.add_argument("--delta", type=float, default=0.5)
    q.add_argument("--grid", type=_grid, default=None)
    q.add_argument("--seed", type=_seed, default=0)
    q.add_argument("--replicates", type=int, default=20000)
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_renewal)
    q = rs.add_parser("moments", help="h-moments of spine excursions")
    q.add_argument("model", help=model_help)
    q.add_argument("--type", type=int, default=1, dest="type_")
    q.add_argument("--eps", type=float, default=0.5)
    q.add_argument("--seed", type=_seed, default=0)
    q.add_argument("--replicates", type=int, default=20000)
    q.set_defaults(func=cmd_renewal)

    p = sub.add_parser("verify", help="LLN, ratio and rate experiments")
    vs = p.add_subparsers(dest="which", required=True)
    for name in ("wlln", "ratio", "rate", "nerman-rate"):
        q = vs.add_parser(name)
        q.add_argument("model", help=model_help)
        _common(q)
        q.add_argument("--grid", type=_grid, default=None)
        q.add_argument("--phi", default="born")
        if name == "ratio":
            q.add_argument("--psi", required=True)
        if name in ("rate", "nerman-rate"):
            q.add_argument("--delta", type=float, default=0.25)
        if name in ("wlln", "rate"):
            q.add_argument("--proxy", choices=(PROXY_COMING, PROXY_LAST_GENERATION), default=DEFAULT_PROXY)
        q.set_defaults(func=cmd_verify)

    p = sub.add_parser("suite", help="run a suite file ('quick' for the bundled one)")
    p.add_argument("config")
    p.add_argument("--out", default="cmj-reports")
    p.add_argument("--seed", type=_seed, default=None, help="overrides the suite seed")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_suite)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ModelError, SpectralError, PreconditionError, ValueError, KeyError, OSError) as exc:
        print(f"cmj: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
