"""Command-line entry point: ``bidifac fit | impute | simulate``.

Exit codes: 0 success, 1 input error, 2 fit stopped at ``--max-iter``.
Settings come from flags, then a ``--config`` key/value file, then defaults;
the effective settings are written to ``config.txt`` in the output directory.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import diagnostics as diag
from .grid import (
    GridFormatError,
    LinkedMatrixGrid,
    MissingMask,
    _parse_manifest,
    apply_preprocess,
    center_blocks,
    load_grid,
    read_block_file,
    save_grid,
    scale_blocks,
    toy_manifest,
)
from .imputation import BASELINES, EmSettings, impute, impute_baseline
from .penalty import enumerate_modules, load_modules, module_count, save_modules
from .simulation import (
    SimConfig,
    class_rse,
    holdout_mask,
    rng_for,
    rosr,
    rse_values,
    simulate_bidirectional,
    simulate_vertical,
    specs_match,
    synthetic_reference,
)
from .solver import Decomposition, FitOptions, fit_adaptive, fit_fixed, save_decomposition

log = logging.getLogger("bidifac")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2

DEFAULTS = {
    "modules": "enumerate",
    "center": "block",
    "scale": "mad",
    "max_iter": 500,
    "tol": 1e-8,
    "temper_alpha0": 8.0,
    "temper_steps": 20,
    "seed": 0,
    "threads": None,
    "method": "bidifac",
    "mask": "rows=1,cols=1,entries=10",
    "em_tol": 1e-6,
    "em_max_iter": 100,
    "rank_max": 20,
    "design": "eq11",
    "rank": 1,
    "s2n": 1.0,
    "reps": 10,
    "fit": "none",
    "budget": None,
    "plots": False,
}

CASTS = {
    "max_iter": int, "temper_steps": int, "seed": int, "threads": int, "em_max_iter": int,
    "rank_max": int, "rank": int, "reps": int, "budget": int,
    "tol": float, "temper_alpha0": float, "em_tol": float, "s2n": float,
    "plots": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
}


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# settings


def _read_config(path) -> dict:
    try:
        raw = _parse_manifest(path)
    except (OSError, GridFormatError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for key, val in raw.items():
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise InputError(f"unknown config key {key!r} in {path}")
        try:
            out[key] = CASTS.get(key, str)(val)
        except ValueError as exc:
            raise InputError(f"bad value for {key} in {path}: {val!r}") from exc
    return out


def resolve_threads(value) -> int:
    """Thread count: explicit value, else ``BIDIFAC_THREADS``, else the CPU count."""
    if value is None:
        env = os.environ.get("BIDIFAC_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError as exc:
                raise InputError(f"BIDIFAC_THREADS must be an integer, got {env!r}") from exc
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise InputError("thread count must be positive")
    return value


def effective_settings(args) -> dict:
    """Flags override the config file, which overrides defaults."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(_read_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["threads"] = resolve_threads(cfg["threads"])
    return cfg


def _write_config(out, cfg, extra=None):
    with open(os.path.join(out, "config.txt"), "w") as fh:
        for key, val in {**(extra or {}), **cfg}.items():
            fh.write(f"{key} = {val}\n")


def _fit_options(cfg) -> FitOptions:
    try:
        return FitOptions(
            max_iter=cfg["max_iter"], rel_tol=cfg["tol"], temper_alpha0=cfg["temper_alpha0"],
            temper_steps=cfg["temper_steps"], seed=cfg["seed"], threads=cfg["threads"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _parse_modules(value, grid):
    """``enumerate``, ``file:PATH`` or ``adaptive:K`` -> spec list or adaptive budget."""
    if value == "enumerate":
        try:
            return enumerate_modules(grid.I, grid.J)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    kind, _, rest = value.partition(":")
    if kind == "file" and rest:
        try:
            specs = load_modules(rest)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read module file {rest}: {exc}") from exc
        for s in specs:
            if len(s.r_incl) != grid.I or len(s.c_incl) != grid.J:
                raise InputError(f"module {s} does not match a {grid.I}x{grid.J} grid")
        return specs
    if kind == "adaptive" and rest:
        try:
            k = int(rest)
        except ValueError:
            k = 0
        if k < 1:
            raise InputError(f"adaptive budget must be a positive integer, got {rest!r}")
        return k
    raise InputError(f"--modules must be enumerate, file:PATH or adaptive:K, got {value!r}")


def _preprocess(grid, cfg):
    reports = []
    if cfg["center"] != "none":
        grid, rep = center_blocks(grid, cfg["center"], empty_rows="block-mean")
        reports.append(rep)
    if cfg["scale"] != "none":
        grid, rep = scale_blocks(grid, cfg["scale"])
        reports.append(rep)
    return grid, reports


def _load(manifest):
    """Load a manifest path, or a bundled dataset by name (``toy2x2``, ``toy1x1``)."""
    if not os.path.exists(manifest) and os.sep not in manifest:
        try:
            manifest = toy_manifest(manifest)
        except FileNotFoundError:
            pass
    try:
        return load_grid(manifest)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load grid {manifest}: {exc}") from exc


def _run_fit(grid, modules, opts):
    if isinstance(modules, int):
        return fit_adaptive(grid, modules, opts)
    return fit_fixed(grid, modules, opts)


def write_fit_reports(out, decomp: Decomposition):
    """Decomposition directory plus variance table and identifiability report."""
    save_decomposition(decomp, out)
    with open(os.path.join(out, "variance.tsv"), "w") as fh:
        fh.write(diag.format_variance_table(diag.variance_explained(decomp)))
    report = diag.verify_identifiability(decomp)
    with open(os.path.join(out, "identifiability.txt"), "w") as fh:
        fh.write(report.format())
    with open(os.path.join(out, "identifiability_summary.txt"), "w") as fh:
        for key, val in report.summary().items():
            fh.write(f"{key} = {val}\n")
    save_modules(decomp.specs, os.path.join(out, "module_specs.tsv"))


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    cfg = effective_settings(args)
    grid = _load(args.manifest)
    if not grid.is_complete:
        raise InputError("grid has missing values; use the impute command")
    grid, _ = _preprocess(grid, cfg)
    modules = _parse_modules(cfg["modules"], grid)
    decomp = _run_fit(grid, modules, _fit_options(cfg))
    os.makedirs(args.out, exist_ok=True)
    write_fit_reports(args.out, decomp)
    _write_config(args.out, cfg, {"command": "fit", "manifest": args.manifest})
    print(f"{decomp.method} fit: {len(decomp.modules)} modules, {decomp.iterations} iterations, "
          f"objective {decomp.objective:.10g}, converged={decomp.converged}")
    return EXIT_OK if decomp.converged else EXIT_NONCONVERGED


def parse_mask_spec(text) -> dict:
    """``rows=2,cols=2,entries=50`` -> counts per block."""
    out = {"rows": 0, "cols": 0, "entries": 0}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep or key.strip() not in out:
            raise InputError(f"bad mask spec item {part!r}; expected rows=, cols= or entries=")
        try:
            out[key.strip()] = int(val)
        except ValueError as exc:
            raise InputError(f"mask count must be an integer: {part!r}") from exc
        if out[key.strip()] < 0:
            raise InputError(f"mask count must be non-negative: {part!r}")
    return out


def _load_mask(value, grid, seed) -> MissingMask:
    if os.path.exists(value):
        try:
            m = read_block_file(value)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read mask file {value}: {exc}") from exc
        if m.shape != grid.shape:
            raise InputError(f"mask shape {m.shape} does not match grid shape {grid.shape}")
        return MissingMask(np.nan_to_num(m) != 0, grid.M, grid.N)
    counts = parse_mask_spec(value)
    try:
        return holdout_mask(grid, rng=rng_for(seed, 0), **counts)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_impute(args) -> int:
    cfg = effective_settings(args)
    raw = _load(args.manifest)
    truth = _load(args.truth) if args.truth else None
    if truth is not None and truth.shape != raw.shape:
        raise InputError("truth grid shape differs from the data grid")
    mask = _load_mask(cfg["mask"], raw, cfg["seed"])
    mask = mask | MissingMask(np.isnan(raw.data), raw.M, raw.N)
    if truth is None and not np.isnan(raw.data).any():
        truth = raw  # held-out cells are known
    masked = raw.with_missing(mask)
    grid, reports = _preprocess(masked, cfg)
    opts = _fit_options(cfg)
    em = EmSettings(cfg["em_tol"], cfg["em_max_iter"])
    method = cfg["method"]
    try:
        if method == "bidifac":
            modules = _parse_modules(cfg["modules"], grid)
            res = impute(grid, mask, modules, opts, em)
            completed, fitted, ok = res.completed, res.decomposition.signal(), res.converged
        elif method in BASELINES:
            res = impute_baseline(grid, mask, method, opts, em, cfg["rank_max"], rng_for(cfg["seed"], 1))
            completed, fitted, ok = res.completed, res.fitted, res.converged
        else:
            raise InputError(f"unknown method {method!r}")
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    save_grid(completed, os.path.join(args.out, "completed"))
    if method == "bidifac":
        write_fit_reports(os.path.join(args.out, "fit"), res.decomposition)
    counts = {k: int(v.sum()) for k, v in mask.classify().items()}
    with open(os.path.join(args.out, "mask_summary.tsv"), "w") as fh:
        fh.write("class\tcells\n" + "".join(f"{k}\t{v}\n" for k, v in counts.items()))
    if truth is not None:
        ref = truth
        for rep in reports:
            ref = apply_preprocess(ref, rep)
        table = class_rse(ref.data, fitted, mask)
        with open(os.path.join(args.out, "rse.tsv"), "w") as fh:
            fh.write("method\t" + "\t".join(table) + "\n")
            fh.write(method + "\t" + "\t".join(f"{v:.6g}" for v in table.values()) + "\n")
        print("RSE " + " ".join(f"{k}={v:.3f}" for k, v in table.items()))
    _write_config(args.out, cfg, {"command": "impute", "manifest": args.manifest, "truth": args.truth})
    print(f"imputed {mask.count} cells with {method}; converged={ok}")
    return EXIT_OK if ok else EXIT_NONCONVERGED


@dataclass
class _RepResult:
    rep: int
    label: str
    rse: np.ndarray
    rosr: float
    match: bool | None
    converged: bool


def _class_names(truth, design):
    if design == "eq11":
        names = {3: "global", 2: "pairwise", 1: "individual"}
        return [names[sum(t.spec.r_incl)] for t in truth]
    return ["all"] * len(truth)


def _simulate_one(cfg, rep):
    design = cfg["design"]
    if design == "eq11":
        sc = SimConfig.eq11(rank=cfg["rank"], s2n=cfg["s2n"], seed=cfg["seed"])
        grid, truth = simulate_vertical(sc, rep)
    elif design == "sparse10":
        sc = SimConfig.sparse10(rank=cfg["rank"], s2n=cfg["s2n"], seed=cfg["seed"])
        grid, truth = simulate_vertical(sc, rep)
    else:
        ref = synthetic_reference(cfg["seed"] + rep)
        grid, truth, _ = simulate_bidirectional(ref, s2n=cfg["s2n"], seed=cfg["seed"], rep=rep)
    return grid, truth


def _emit_plots(out, grid, decomp):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = diag.variance_explained(decomp)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(rows)), [r.frob2 for r in rows])
    ax.set_xticks(range(len(rows)), [f"{r.r_bits}/{r.c_bits}" for r in rows], rotation=90, fontsize=7)
    ax.set_ylabel("sum of squares")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "variance_bars.png"), dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in decomp.modules:
        if m.rank:
            ax.plot(np.arange(1, m.rank + 1), m.factors.D[: m.rank], marker="o", label=f"{m.spec.r_bits}/{m.spec.c_bits}")
    ax.set_xlabel("component")
    ax.set_ylabel("singular value")
    if len(decomp.modules) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "scree.png"), dpi=100)
    plt.close(fig)

    fitted = [m for m in decomp.modules if m.rank]
    if fitted:
        top = max(fitted, key=lambda m: m.frob2)
        fig, ax = plt.subplots(figsize=(4, 4))
        V = top.factors.V * top.factors.D
        ax.scatter(V[:, 0], V[:, 1] if V.shape[1] > 1 else np.zeros(V.shape[0]), s=6)
        ax.set_title(f"scores, module {top.spec.r_bits}/{top.spec.c_bits}", fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out, "scores.png"), dpi=100)
        plt.close(fig)


def cmd_simulate(args) -> int:
    cfg = effective_settings(args)
    if cfg["design"] not in ("eq11", "sparse10", "bidirectional"):
        raise InputError(f"unknown design {cfg['design']!r}")
    if cfg["fit"] not in ("none", "true", "estimated", "both"):
        raise InputError(f"--fit must be none, true, estimated or both, got {cfg['fit']!r}")
    if cfg["reps"] < 1:
        raise InputError("--reps must be positive")
    opts = _fit_options(cfg)
    os.makedirs(args.out, exist_ok=True)
    results = []
    all_ok = True
    for rep in range(cfg["reps"]):
        try:
            grid, truth = _simulate_one(cfg, rep)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        rep_dir = os.path.join(args.out, f"rep_{rep + 1}")
        save_grid(grid, os.path.join(rep_dir, "grid"))
        save_decomposition(Decomposition(truth, grid.M, grid.N, method="truth"), os.path.join(rep_dir, "truth"))
        fits = []
        if cfg["fit"] in ("true", "both"):
            fits.append(("true", fit_fixed(grid, [t.spec for t in truth], opts), "fixed"))
        if cfg["fit"] in ("estimated", "both"):
            budget = cfg["budget"] or len(truth)
            fits.append(("estimated", fit_adaptive(grid, budget, opts), "align"))
        for label, decomp, matching in fits:
            write_fit_reports(os.path.join(rep_dir, f"fit_{label}"), decomp)
            results.append(_RepResult(
                rep + 1, label, rse_values(truth, decomp.modules, matching), rosr(truth, decomp.modules),
                specs_match(truth, decomp.modules) if label == "estimated" else None, decomp.converged,
            ))
            all_ok = all_ok and decomp.converged
            if cfg["plots"] and rep == 0:
                _emit_plots(os.path.join(rep_dir, f"fit_{label}"), grid, decomp)
    if results:
        _write_summary(args.out, cfg, truth, results)
    _write_config(args.out, cfg, {"command": "simulate"})
    print(f"simulated {cfg['reps']} replication(s) of design {cfg['design']} into {args.out}")
    return EXIT_OK if all_ok else EXIT_NONCONVERGED


def _write_summary(out, cfg, truth, results):
    classes = _class_names(truth, cfg["design"])
    order = list(dict.fromkeys(classes))
    labels = [lab for lab in ("true", "estimated") if any(r.label == lab for r in results)]
    with open(os.path.join(out, "raw.tsv"), "w") as fh:
        fh.write("rep\tfit\t" + "\t".join(f"rse_{c}" for c in order) + "\trosr\tspecs_match\tconverged\n")
        for r in results:
            per = [np.nanmean(r.rse[[c == name for c in classes]]) for name in order]
            fh.write(f"{r.rep}\t{r.label}\t" + "\t".join(f"{v:.6g}" for v in per)
                     + f"\t{r.rosr:.6g}\t{'' if r.match is None else r.match}\t{r.converged}\n")
    lines = ["structure\t" + "\t".join(f"RSE_{lab}" for lab in labels)]
    for name in order + ["ROSR"]:
        vals = []
        for lab in labels:
            rs = [r for r in results if r.label == lab]
            if name == "ROSR":
                vals.append(np.mean([r.rosr for r in rs]))
            else:
                vals.append(np.mean([np.nanmean(r.rse[[c == name for c in classes]]) for r in rs]))
        lines.append(name + "\t" + "\t".join(f"{v:.3f}" for v in vals))
    est = [r for r in results if r.label == "estimated"]
    if est:
        lines.append(f"# estimated specs equal truth in {sum(r.match for r in est)}/{len(est)} reps")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "summary.tsv"), "w") as fh:
        fh.write(text)
    print(text, end="")


# ---------------------------------------------------------------------------
# argument parsing


def _add_fit_flags(p):
    p.add_argument("--config", help="key = value file with defaults for any flag")
    p.add_argument("--modules", help="enumerate | file:PATH | adaptive:K")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float, help="relative objective change for convergence")
    p.add_argument("--temper-alpha0", dest="temper_alpha0", type=float)
    p.add_argument("--temper-steps", dest="temper_steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="default: $BIDIFAC_THREADS or the CPU count")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are input errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bidifac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a decomposition to a linked-matrix grid")
    p.add_argument("manifest")
    _add_fit_flags(p)
    p.add_argument("--center", choices=["block", "row", "none"])
    p.add_argument("--scale", choices=["mad", "var", "rowsd", "none"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="impute held-out or missing cells")
    p.add_argument("manifest")
    _add_fit_flags(p)
    p.add_argument("--mask", help="0/1 matrix file or spec like rows=2,cols=2,entries=50")
    p.add_argument("--method", help="bidifac | " + " | ".join(BASELINES))
    p.add_argument("--truth", help="manifest of the complete grid, for RSE by missingness class")
    p.add_argument("--center", choices=["block", "row", "none"])
    p.add_argument("--scale", choices=["mad", "var", "rowsd", "none"])
    p.add_argument("--em-tol", dest="em_tol", type=float)
    p.add_argument("--em-max-iter", dest="em_max_iter", type=int)
    p.add_argument("--rank-max", dest="rank_max", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("simulate", help="generate simulated grids and optionally score fits")
    p.add_argument("--design", help="eq11 | sparse10 | bidirectional")
    p.add_argument("--rank", type=int)
    p.add_argument("--s2n", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--fit", help="none | true | estimated | both")
    p.add_argument("--budget", type=int, help="module budget for estimated fits (default: true count)")
    p.add_argument("--plots", action="store_const", const=True)
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
