"""Block-coordinate minimisation of the structured nuclear-norm objective.

The objective for modules ``S_k`` with penalties ``lam_k`` is::

    0.5 * ||X - sum_k S_k||_F^2 + sum_k lam_k * ||S_k||_*

where ``S_k`` is zero outside the rows/columns selected by its module
spec. :func:`fit_fixed` cycles over a fixed list of module specs, replacing
each module by the soft-thresholded SVD of its partial residual.
:func:`fit_adaptive` additionally chooses each module's row and column sets
by greedy forward selection, with penalties tempered (inflated, then
decayed) over the first iterations.
"""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import LinkedMatrixGrid, format_value, read_block_file, write_matrix
from .linalg import SvdTriple, soft_svd, svd, svdvals
from .penalty import (
    ModuleSpec,
    check_penalty_conditions,
    lambda_for,
    with_default_lambdas,
)

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-9


@dataclass
class MonotonicityLog:
    """Process-wide tally of objective increases seen in finished fits."""

    fits: int = 0
    violations: int = 0

    def record(self, trace, alphas=None):
        self.fits += 1
        for t in range(1, len(trace)):
            if alphas is not None and not (alphas[t - 1] == 1.0 and alphas[t] == 1.0):
                continue  # penalties still changing between these sweeps
            if trace[t] > trace[t - 1] + MONOTONE_SLACK * max(1.0, abs(trace[t - 1])):
                self.violations += 1
                log.warning("objective increased at sweep %d: %r -> %r", t, trace[t - 1], trace[t])


MONOTONICITY = MonotonicityLog()


@dataclass
class FitOptions:
    """Convergence and tempering settings.

    ``rel_tol`` applies to the relative change in objective between full
    sweeps. Tempering multiplies every penalty by ``temper_schedule`` which
    decays linearly from ``temper_alpha0`` to 1 over ``temper_steps`` sweeps
    (adaptive fits only).
    """

    max_iter: int = 500
    rel_tol: float = 1e-8
    temper_alpha0: float = 8.0
    temper_steps: int = 20
    K_tilde: int | None = None
    seed: int = 0
    threads: int = 1
    max_set_passes: int = 10
    check_updates: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.temper_alpha0 < 1:
            raise ValueError("temper_alpha0 must be >= 1")
        if self.temper_steps < 0:
            raise ValueError("temper_steps must be non-negative")
        if self.K_tilde is not None and self.K_tilde < 1:
            raise ValueError("K_tilde must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


def temper_schedule(opts: FitOptions, iteration: int) -> float:
    """Penalty multiplier for sweep ``iteration`` (1-based)."""
    if iteration < 1:
        raise ValueError("iteration is 1-based")
    if opts.temper_steps == 0:
        return 1.0
    return max(1.0, opts.temper_alpha0 * (1 - (iteration - 1) / opts.temper_steps))


class ModuleEstimate:
    """A fitted module held as SVD factors of its active submatrix."""

    def __init__(self, spec: ModuleSpec, factors: SvdTriple, M, N):
        self.spec = spec
        self.factors = factors
        self.M = tuple(M)
        self.N = tuple(N)
        self.rows = spec.rows(M)
        self.cols = spec.cols(N)
        if factors.U.shape[0] != self.rows.size or factors.V.shape[0] != self.cols.size:
            raise ValueError(
                f"factors of shape {factors.shape} do not match active submatrix "
                f"{(self.rows.size, self.cols.size)} of {spec}"
            )
        self.nuclear_norm = float(factors.D.sum())

    @classmethod
    def zero(cls, spec, M, N):
        m, n = spec.rows(M).size, spec.cols(N).size
        return cls(spec, SvdTriple(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0))), M, N)

    @property
    def lam(self):
        return self.spec.lam

    @property
    def rank(self) -> int:
        return self.factors.rank

    @property
    def frob2(self) -> float:
        return float(np.sum(self.factors.D**2))

    def submatrix(self) -> np.ndarray:
        return self.factors.matrix()

    def expand(self) -> np.ndarray:
        """The module as a full ``M x N`` matrix, zero outside its active submatrix."""
        S = np.zeros((sum(self.M), sum(self.N)))
        if self.factors.D.size:
            S[np.ix_(self.rows, self.cols)] = self.submatrix()
        return S

    def __repr__(self):
        return f"ModuleEstimate({self.spec}, rank={self.rank}, nuc={self.nuclear_norm:.4g})"


@dataclass
class Decomposition:
    """Fitted modules plus the per-sweep objective trace."""

    modules: list
    M: tuple
    N: tuple
    objective_trace: list = field(default_factory=list)
    alpha_trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    options: FitOptions | None = None
    method: str = "fixed"

    @property
    def specs(self):
        return [m.spec for m in self.modules]

    def signal(self) -> np.ndarray:
        total = np.zeros((sum(self.M), sum(self.N)))
        for m in self.modules:
            if m.factors.D.size:
                total[np.ix_(m.rows, m.cols)] += m.submatrix()
        return total

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


def _data(grid) -> np.ndarray:
    X = grid.data if isinstance(grid, LinkedMatrixGrid) else np.asarray(grid, dtype=float)
    if np.isnan(X).any():
        raise ValueError("grid has missing values; use bidifac.imputation.impute")
    return X


def objective(grid, modules) -> float:
    """``0.5*||X - sum S_k||_F^2 + sum lam_k ||S_k||_*``."""
    X = _data(grid)
    total = np.zeros_like(X)
    pen = 0.0
    for m in modules:
        if m.factors.D.size:
            total[np.ix_(m.rows, m.cols)] += m.submatrix()
        pen += m.lam * m.nuclear_norm
    return 0.5 * float(np.sum((X - total) ** 2)) + pen


def _objective_from_total(X, total, modules, alpha=1.0):
    return 0.5 * float(np.sum((X - total) ** 2)) + alpha * sum(m.lam * m.nuclear_norm for m in modules)


def _total(modules, shape):
    total = np.zeros(shape)
    for m in modules:
        if m.factors.D.size:
            total[np.ix_(m.rows, m.cols)] += m.submatrix()
    return total


def _converged(prev, cur, tol):
    return abs(prev - cur) <= tol * max(abs(prev), np.finfo(float).tiny)


def _update_module(X, total, mod, spec, lam, M, N):
    """Replace ``mod`` by the soft-SVD of its partial residual on ``spec``'s submatrix.

    ``total`` (the running sum of all modules) is updated in place.
    """
    if spec.key == mod.spec.key:
        rows, cols = mod.rows, mod.cols
        ix = np.ix_(rows, cols)
        old = mod.submatrix() if mod.factors.D.size else 0.0
        resid = X[ix] - total[ix] + old
        new = ModuleEstimate(spec, soft_svd(resid, lam).truncate(), M, N)
        total[ix] += (new.submatrix() if new.factors.D.size else 0.0) - old
    else:
        if mod.factors.D.size:
            total[np.ix_(mod.rows, mod.cols)] -= mod.submatrix()
        rows, cols = spec.rows(M), spec.cols(N)
        ix = np.ix_(rows, cols)
        new = ModuleEstimate(spec, soft_svd(X[ix] - total[ix], lam).truncate(), M, N)
        if new.factors.D.size:
            total[ix] += new.submatrix()
    return new


def _check_step(X, total, modules, alpha, last, where):
    cur = _objective_from_total(X, total, modules, alpha)
    if cur > last + MONOTONE_SLACK * max(1.0, abs(last)):
        raise AssertionError(f"objective increased at {where}: {last!r} -> {cur!r}")
    return cur


def fit_fixed(grid, specs, opts: FitOptions | None = None, init=None, order=None,
              check_penalties=True) -> Decomposition:
    """Fit modules with fixed row/column sets by block coordinate descent.

    Parameters
    ----------
    grid : LinkedMatrixGrid
        Fully observed grid.
    specs : list of ModuleSpec
        Module row/column sets; missing penalties default to
        :func:`~bidifac.penalty.lambda_for`.
    opts : FitOptions, optional
    init : Decomposition, optional
        Warm start; its module specs must match ``specs``.
    order : sequence of int, optional
        Order in which modules are visited within a sweep.
    """
    opts = opts or FitOptions()
    X = _data(grid)
    M, N = tuple(grid.M), tuple(grid.N)
    specs = with_default_lambdas(specs, M, N)
    if check_penalties and len(specs) <= 1024:
        bad = check_penalty_conditions(specs)
        if bad:
            warnings.warn(f"{len(bad)} penalty-condition violations, e.g. {bad[0]}", stacklevel=2)
    if init is not None:
        if [m.spec.key for m in init.modules] != [s.key for s in specs]:
            raise ValueError("warm start modules do not match specs")
        mods = [ModuleEstimate(s, m.factors, M, N) for s, m in zip(specs, init.modules)]
    else:
        mods = [ModuleEstimate.zero(s, M, N) for s in specs]
    order = list(range(len(specs))) if order is None else list(order)
    if sorted(order) != list(range(len(specs))):
        raise ValueError("order must be a permutation of module indices")

    total = _total(mods, X.shape)
    trace = [_objective_from_total(X, total, mods)]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        last = trace[-1]
        for k in order:
            mods[k] = _update_module(X, total, mods[k], specs[k], specs[k].lam, M, N)
            if opts.check_updates:
                last = _check_step(X, total, mods, 1.0, last, f"sweep {it}, module {k}")
        total = _total(mods, X.shape)
        trace.append(_objective_from_total(X, total, mods))
        if _converged(trace[-2], trace[-1], opts.rel_tol):
            converged = True
            break
    if not converged:
        log.info("fit_fixed stopped at max_iter=%d without reaching rel_tol", opts.max_iter)
    MONOTONICITY.record(trace)
    return Decomposition(mods, M, N, trace, [1.0] * len(trace), converged, it, opts, "fixed")


# ---------------------------------------------------------------------------
# adaptive module selection


def _gain(d, lam):
    """Objective decrease ``0.5*sum(max(d - lam, 0)^2)`` of the optimal soft-SVD update."""
    return 0.5 * float(np.sum(np.maximum(d - lam, 0.0) ** 2))


def _gram_svdvals(G):
    return np.sqrt(np.maximum(np.linalg.eigvalsh(G), 0.0))


class _SetSelector:
    """Greedy forward selection of a module's row-sets and column-sets.

    Candidate singular values come from the Gram matrix on the fixed side
    when that side is the smaller one: the per-set Grams are computed once
    per pass and summed for each candidate union.
    """

    def __init__(self, M, N, alpha, pool=None):
        self.M, self.N = list(M), list(N)
        self.alpha = alpha
        self.pool = pool
        ro = np.concatenate([[0], np.cumsum(M)]).astype(int)
        co = np.concatenate([[0], np.cumsum(N)]).astype(int)
        self.row_idx = [np.arange(ro[i], ro[i + 1]) for i in range(len(M))]
        self.col_idx = [np.arange(co[j], co[j + 1]) for j in range(len(N))]

    def lam(self, rset, cset):
        return self.alpha * (np.sqrt(sum(self.M[i] for i in rset)) + np.sqrt(sum(self.N[j] for j in cset)))

    def score(self, resid, rset, cset):
        rows = np.concatenate([self.row_idx[i] for i in rset])
        cols = np.concatenate([self.col_idx[j] for j in cset])
        return _gain(svdvals(resid[np.ix_(rows, cols)]), self.lam(rset, cset))

    def _forward(self, resid, rows_side, fixed):
        """Forward pass over row-sets (``rows_side``) or column-sets with the other side fixed."""
        free_sizes = self.M if rows_side else self.N
        free_idx = self.row_idx if rows_side else self.col_idx
        fixed_idx = np.concatenate([(self.col_idx if rows_side else self.row_idx)[t] for t in fixed])
        n_sets = len(free_sizes)
        if fixed_idx.size <= sum(free_sizes):
            # Gram on the fixed side, one term per free set
            grams = []
            for t in range(n_sets):
                B = resid[np.ix_(free_idx[t], fixed_idx)] if rows_side else resid[np.ix_(fixed_idx, free_idx[t])].T
                grams.append(B.T @ B)

            def values(trial):
                return _gram_svdvals(sum(grams[t] for t in trial))
        else:
            def values(trial):
                idx = np.concatenate([free_idx[t] for t in trial])
                sub = resid[np.ix_(idx, fixed_idx)] if rows_side else resid[np.ix_(fixed_idx, idx)]
                return svdvals(sub)

        chosen, best = [], 0.0
        while len(chosen) < n_sets:
            cands = [t for t in range(n_sets) if t not in chosen]

            def sc(t):
                trial = sorted(chosen + [t])
                lam = self.lam(trial, fixed) if rows_side else self.lam(fixed, trial)
                return _gain(values(trial), lam)

            scores = list(self.pool.map(sc, cands)) if self.pool else [sc(t) for t in cands]
            top = int(np.argmax(scores))  # first maximum -> lowest index on ties
            if not scores[top] > best:
                break
            chosen.append(cands[top])
            best = scores[top]
        return sorted(chosen), best

    def select(self, resid, c_start, max_passes):
        """Alternate row and column passes until the chosen sets repeat."""
        I, J = len(self.M), len(self.N)
        cset = [j for j in range(J) if c_start[j]]
        rset, _ = self._forward(resid, True, cset)
        if not rset and J > 1:
            # nothing clears the penalty with the current columns: seed from one column-set
            best = 0.0
            for j in range(J):
                r_j, sc = self._forward(resid, True, [j])
                if sc > best:
                    rset, cset, best = r_j, [j], sc
        if not rset:
            return None, 0.0
        seen = {(tuple(rset), tuple(cset))}
        for _ in range(max_passes):
            cset_new = self._forward(resid, False, rset)[0] or cset
            if cset_new == cset:
                break  # the row pass would repeat the one that produced rset
            rset_new = self._forward(resid, True, cset_new)[0] or rset
            state = (tuple(rset_new), tuple(cset_new))
            rset, cset = rset_new, cset_new
            if state in seen:
                break
            seen.add(state)
        r = tuple(int(i in rset) for i in range(I))
        c = tuple(int(j in cset) for j in range(J))
        return ModuleSpec(r, c), self.score(resid, rset, cset)


def full_spec(I, J, M, N) -> ModuleSpec:
    full = ModuleSpec((1,) * I, (1,) * J)
    return full.with_lambda(lambda_for(full, M, N))


def _merge_duplicates(mods, spare, M, N):
    """Fold modules that landed on the same sets into one and free the others.

    The merged signal keeps the penalty term from growing (the nuclear norm
    is subadditive), and the freed slots restart from zero on ``spare`` so
    the next sweep can place them on sets not yet covered.
    """
    first = {}
    out = list(mods)
    for k, m in enumerate(mods):
        if not m.factors.D.size or not m.factors.D[0] > 0:
            continue
        if m.spec.key not in first:
            first[m.spec.key] = k
            continue
        j = first[m.spec.key]
        merged = svd(out[j].submatrix() + m.submatrix()).truncate()
        out[j] = ModuleEstimate(out[j].spec, merged, M, N)
        out[k] = ModuleEstimate.zero(spare, M, N)
    return out


def fit_adaptive(grid, K_tilde=None, opts: FitOptions | None = None, init=None,
                 callback=None) -> Decomposition:
    """Fit ``K_tilde`` modules whose row and column sets are selected from the data.

    Each sweep visits every module: its row-sets are chosen by forward
    selection with its column-sets fixed, then the column-sets with the
    row-sets fixed, alternating until the sets stop changing; the module is
    then replaced by the soft-SVD of its partial residual on the selected
    submatrix. Candidate sets are ranked by ``0.5*sum(max(d - lam, 0)^2)``
    over the candidate's singular values ``d``. While penalties are
    tempered the selected sets always replace the current ones; afterwards
    a new set is kept only if it scores strictly better than the module's
    current set, which makes every update a descent step. Modules that end
    a sweep on identical sets are merged, freeing a slot.

    Penalties are multiplied by :func:`temper_schedule` during the first
    ``temper_steps`` sweeps unless a warm start ``init`` is given.
    ``callback(iteration, alpha, modules)`` runs after every sweep.
    """
    opts = opts or FitOptions()
    K = K_tilde if K_tilde is not None else opts.K_tilde
    if K is None or K < 1:
        raise ValueError("K_tilde must be a positive integer")
    X = _data(grid)
    M, N = tuple(grid.M), tuple(grid.N)
    I, J = len(M), len(N)
    if init is not None:
        mods = [ModuleEstimate(m.spec.with_lambda(lambda_for(m.spec, M, N)), m.factors, M, N)
                for m in init.modules]
        tempered = False
    else:
        mods = [ModuleEstimate.zero(full_spec(I, J, M, N), M, N) for _ in range(K)]
        tempered = True

    pool = ThreadPoolExecutor(opts.threads) if opts.threads > 1 else None
    total = _total(mods, X.shape)
    trace = [_objective_from_total(X, total, mods)]
    alphas = [temper_schedule(opts, 1) if tempered else 1.0]
    converged = False
    it = 0
    try:
        for it in range(1, opts.max_iter + 1):
            alpha = temper_schedule(opts, it) if tempered else 1.0
            selector = _SetSelector(M, N, alpha, pool)
            last = _objective_from_total(X, total, mods, alpha)
            for k in range(len(mods)):
                mod = mods[k]
                resid = X - total
                if mod.factors.D.size:
                    resid[np.ix_(mod.rows, mod.cols)] += mod.submatrix()
                cand, cand_score = selector.select(resid, mod.spec.c_incl, opts.max_set_passes)
                cur_score = selector.score(
                    resid,
                    [i for i in range(I) if mod.spec.r_incl[i]],
                    [j for j in range(J) if mod.spec.c_incl[j]],
                )
                spec = mod.spec
                if cand is not None and (alpha > 1.0 or cand_score > cur_score):
                    spec = cand.with_lambda(lambda_for(cand, M, N))
                mods[k] = _update_module(X, total, mod, spec, alpha * spec.lam, M, N)
                if opts.check_updates:
                    last = _check_step(X, total, mods, alpha, last, f"sweep {it}, module {k}")
            mods = _merge_duplicates(mods, full_spec(I, J, M, N), M, N)
            total = _total(mods, X.shape)
            trace.append(_objective_from_total(X, total, mods))
            alphas.append(alpha)
            if callback is not None:
                callback(it, alpha, mods)
            if alpha == 1.0 and alphas[-2] == 1.0 and _converged(trace[-2], trace[-1], opts.rel_tol):
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if not converged:
        log.info("fit_adaptive stopped at max_iter=%d without reaching rel_tol", opts.max_iter)
    MONOTONICITY.record(trace, alphas)
    return Decomposition(mods, M, N, trace, alphas, converged, it, opts, "adaptive")


def fixed_point_gap(grid, decomp: Decomposition) -> float:
    """Largest relative change any module would see from one more soft-SVD update."""
    X = _data(grid)
    total = decomp.signal()
    worst = 0.0
    for m in decomp.modules:
        ix = np.ix_(m.rows, m.cols)
        cur = m.submatrix() if m.factors.D.size else np.zeros((m.rows.size, m.cols.size))
        new = soft_svd(X[ix] - total[ix] + cur, m.lam).matrix()
        worst = max(worst, float(np.linalg.norm(new - cur)) / max(1.0, float(np.linalg.norm(cur))))
    return worst


# ---------------------------------------------------------------------------
# serialization


def save_decomposition(decomp: Decomposition, directory):
    """Write the module table, per-module factor files and the objective trace."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "modules.tsv"), "w") as fh:
        fh.write("module\tr_bits\tc_bits\tlambda\trank\tfrob2\tnuclear\n")
        for k, m in enumerate(decomp.modules, 1):
            fh.write(
                f"{k}\t{m.spec.r_bits}\t{m.spec.c_bits}\t{format_value(m.lam)}\t{m.rank}\t"
                f"{format_value(m.frob2)}\t{format_value(m.nuclear_norm)}\n"
            )
    fdir = os.path.join(directory, "factors")
    os.makedirs(fdir, exist_ok=True)
    for k, m in enumerate(decomp.modules, 1):
        write_matrix(os.path.join(fdir, f"module_{k}_U.csv"), m.factors.U)
        write_matrix(os.path.join(fdir, f"module_{k}_D.csv"), m.factors.D[None, :])
        write_matrix(os.path.join(fdir, f"module_{k}_V.csv"), m.factors.V)
    with open(os.path.join(directory, "trace.tsv"), "w") as fh:
        fh.write("iteration\talpha\tobjective\n")
        for t, (a, obj) in enumerate(zip(decomp.alpha_trace, decomp.objective_trace)):
            fh.write(f"{t}\t{format_value(a)}\t{format_value(obj)}\n")
    with open(os.path.join(directory, "fit.txt"), "w") as fh:
        fh.write(f"method = {decomp.method}\n")
        fh.write(f"M = {','.join(map(str, decomp.M))}\n")
        fh.write(f"N = {','.join(map(str, decomp.N))}\n")
        fh.write(f"converged = {str(decomp.converged).lower()}\n")
        fh.write(f"iterations = {decomp.iterations}\n")
        if decomp.options is not None:
            for key, val in asdict(decomp.options).items():
                fh.write(f"option.{key} = {val}\n")


def load_decomposition(directory) -> Decomposition:
    meta = {}
    with open(os.path.join(directory, "fit.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
    M = tuple(int(x) for x in meta["M"].split(","))
    N = tuple(int(x) for x in meta["N"].split(","))
    mods = []
    with open(os.path.join(directory, "modules.tsv")) as fh:
        next(fh)
        for line in fh:
            k, rb, cb, lam, rank = line.split("\t")[:5]
            spec = ModuleSpec(tuple(map(int, rb)), tuple(map(int, cb)), float(lam))
            rank = int(rank)
            if rank == 0:
                mods.append(ModuleEstimate.zero(spec, M, N))
                continue
            base = os.path.join(directory, "factors", f"module_{k}_")
            U = read_block_file(base + "U.csv")
            D = read_block_file(base + "D.csv").ravel()
            V = read_block_file(base + "V.csv")
            mods.append(ModuleEstimate(spec, SvdTriple(U, D, V), M, N))
    trace, alphas = [], []
    with open(os.path.join(directory, "trace.tsv")) as fh:
        next(fh)
        for line in fh:
            _, a, obj = line.split("\t")
            alphas.append(float(a))
            trace.append(float(obj))
    return Decomposition(mods, M, N, trace, alphas, meta.get("converged") == "true",
                         int(meta.get("iterations", 0)), None, meta.get("method", "fixed"))
