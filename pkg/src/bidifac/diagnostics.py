"""Checks and summaries for fitted decompositions.

Includes the linear-independence part of the identifiability conditions,
the factorized (ridge) form of the objective used as an independent
cross-check, per-module variance tables and a module-order uniqueness probe.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import svd, svdvals
from .penalty import with_default_lambdas
from .solver import Decomposition, FitOptions, ModuleEstimate, _converged, _data, fit_fixed

CONDITION1_NOTE = "assumed from solver convergence"


# ---------------------------------------------------------------------------
# identifiability


def _set_positions(flags, sizes, target):
    """Positions of set ``target`` inside the concatenation of the active sets."""
    start = sum(s for s, f in zip(sizes[:target], flags[:target]) if f)
    return slice(start, start + sizes[target])


def _min_sv(vectors, dim):
    if not vectors:
        return float("nan")
    A = np.column_stack(vectors)
    if A.shape[1] > dim:
        return 0.0
    norms = np.linalg.norm(A, axis=0)
    if (norms == 0).any():
        return 0.0
    return float(svdvals(A / norms)[-1])


@dataclass
class IdentifiabilityReport:
    """Minimum singular values of the stacked, column-normalised loadings and scores.

    ``row_min_sv[i]`` is for the loadings on row-set ``i``, ``col_min_sv[j]``
    for the scores on column-set ``j``; ``nan`` marks a set no module uses.
    """

    row_min_sv: list
    col_min_sv: list
    tol: float
    condition1: str = CONDITION1_NOTE

    @property
    def rows_ok(self) -> bool:
        return all(not v <= self.tol for v in self.row_min_sv)

    @property
    def cols_ok(self) -> bool:
        return all(not v <= self.tol for v in self.col_min_sv)

    @property
    def passed(self) -> bool:
        return self.rows_ok and self.cols_ok

    def summary(self) -> dict:
        out = {"passed": self.passed, "tol": self.tol, "condition1": self.condition1,
               "condition2_rows": self.rows_ok, "condition3_cols": self.cols_ok}
        out.update({f"row_set_{i + 1}_min_sv": v for i, v in enumerate(self.row_min_sv)})
        out.update({f"col_set_{j + 1}_min_sv": v for j, v in enumerate(self.col_min_sv)})
        return out

    def format(self) -> str:
        lines = ["set\tindex\tmin_sv\tstatus"]
        for kind, vals in (("row", self.row_min_sv), ("col", self.col_min_sv)):
            for t, v in enumerate(vals, 1):
                status = "unused" if np.isnan(v) else ("ok" if v > self.tol else "FAIL")
                lines.append(f"{kind}\t{t}\t{v:.6g}\t{status}")
        lines.append(f"# penalty minimality: {self.condition1}")
        lines.append(f"# linear independence: {'pass' if self.passed else 'fail'} (tol {self.tol:g})")
        return "\n".join(lines) + "\n"


def verify_identifiability(decomp: Decomposition, tol=1e-6) -> IdentifiabilityReport:
    """Check linear independence of the active loadings per row-set and scores per column-set."""
    M, N = list(decomp.M), list(decomp.N)
    rows = [[] for _ in M]
    cols = [[] for _ in N]
    for m in decomp.modules:
        keep = m.factors.D > 0
        if not keep.any():
            continue
        U, V = m.factors.U[:, keep], m.factors.V[:, keep]
        for i, on in enumerate(m.spec.r_incl):
            if on:
                rows[i].extend(U[_set_positions(m.spec.r_incl, M, i)].T)
        for j, on in enumerate(m.spec.c_incl):
            if on:
                cols[j].extend(V[_set_positions(m.spec.c_incl, N, j)].T)
    return IdentifiabilityReport(
        [_min_sv(v, M[i]) for i, v in enumerate(rows)],
        [_min_sv(v, N[j]) for j, v in enumerate(cols)],
        tol,
    )


# ---------------------------------------------------------------------------
# factorized objective


def balanced_factors(module: ModuleEstimate):
    """``(U sqrt(D), V sqrt(D))``, so ``||U||_F^2 = ||V||_F^2 = ||S||_*``."""
    s = np.sqrt(module.factors.D)
    return module.factors.U * s, module.factors.V * s


@dataclass
class FactorModule:
    """Unconstrained factors ``U`` (active rows x r) and ``V`` (active columns x r)."""

    spec: object
    U: np.ndarray
    V: np.ndarray
    M: tuple
    N: tuple
    rows: np.ndarray = field(init=False)
    cols: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rows, self.cols = self.spec.rows(self.M), self.spec.cols(self.N)

    @classmethod
    def from_estimate(cls, m: ModuleEstimate):
        U, V = balanced_factors(m)
        return cls(m.spec, U, V, m.M, m.N)

    def penalty(self) -> float:
        return self.spec.lam * float(np.sum(self.U**2) + np.sum(self.V**2))

    def to_estimate(self) -> ModuleEstimate:
        return ModuleEstimate(self.spec, svd(self.U @ self.V.T).truncate(), self.M, self.N)


def factorized_objective(grid, modules) -> float:
    """``||X - sum U_k V_k^T||_F^2 + sum lam_k (||U_k||_F^2 + ||V_k||_F^2)``.

    ``modules`` is a Decomposition or list of ModuleEstimate (converted to
    balanced factors) or a list of :class:`FactorModule`.
    """
    X = _data(grid)
    mods = modules.modules if isinstance(modules, Decomposition) else list(modules)
    mods = [m if isinstance(m, FactorModule) else FactorModule.from_estimate(m) for m in mods]
    total = np.zeros_like(X)
    for m in mods:
        total[np.ix_(m.rows, m.cols)] += m.U @ m.V.T
    return float(np.sum((X - total) ** 2)) + sum(m.penalty() for m in mods)


def alternating_factorized_fit(grid, specs, ranks, opts: FitOptions | None = None) -> Decomposition:
    """Minimise :func:`factorized_objective` by alternating ridge updates.

    For each module in turn, with the partial residual ``E`` on its
    submatrix, ``U <- E V (V^T V + lam I)^-1`` then
    ``V <- E^T U (U^T U + lam I)^-1``. Factors start from the balanced
    truncated SVD of the data submatrix.
    """
    opts = opts or FitOptions()
    X = _data(grid)
    M, N = tuple(grid.M), tuple(grid.N)
    specs = with_default_lambdas(specs, M, N)
    ranks = [int(r) for r in ranks]
    if len(ranks) != len(specs):
        raise ValueError("need one rank per module")
    mods = []
    for s, r in zip(specs, ranks):
        rows, cols = s.rows(M), s.cols(N)
        if not 1 <= r <= min(rows.size, cols.size):
            raise ValueError(f"rank {r} does not fit the {rows.size}x{cols.size} submatrix of {s}")
        t = svd(X[np.ix_(rows, cols)], rank=r)
        mods.append(FactorModule(s, t.U * np.sqrt(t.D), t.V * np.sqrt(t.D), M, N))

    total = np.zeros_like(X)
    for m in mods:
        total[np.ix_(m.rows, m.cols)] += m.U @ m.V.T
    trace = [factorized_objective(grid, mods)]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        for m in mods:
            ix = np.ix_(m.rows, m.cols)
            old = m.U @ m.V.T
            E = X[ix] - total[ix] + old
            eye = m.spec.lam * np.eye(m.U.shape[1])
            # ridge normal equations, both Gram matrices symmetric
            m.U = np.linalg.solve(m.V.T @ m.V + eye, m.V.T @ E.T).T
            m.V = np.linalg.solve(m.U.T @ m.U + eye, m.U.T @ E).T
            total[ix] += m.U @ m.V.T - old
        trace.append(float(np.sum((X - total) ** 2)) + sum(m.penalty() for m in mods))
        if _converged(trace[-2], trace[-1], opts.rel_tol):
            converged = True
            break
    return Decomposition([m.to_estimate() for m in mods], M, N, trace, [1.0] * len(trace),
                         converged, it, opts, "factorized")


# ---------------------------------------------------------------------------
# summaries


@dataclass
class VarianceRow:
    module: int
    r_bits: str
    c_bits: str
    rank: int
    frob2: float
    share: float


def variance_explained(decomp: Decomposition) -> list:
    """Per-module ``||S_k||_F^2`` and its share of the total, largest first."""
    f = [m.frob2 for m in decomp.modules]
    tot = sum(f)
    rows = [
        VarianceRow(k + 1, m.spec.r_bits, m.spec.c_bits, m.rank, f[k], f[k] / tot if tot > 0 else 0.0)
        for k, m in enumerate(decomp.modules)
    ]
    return sorted(rows, key=lambda r: (-r.frob2, r.module))


def format_variance_table(rows) -> str:
    lines = ["module\tr_bits\tc_bits\trank\tfrob2\tshare"]
    lines += [f"{r.module}\t{r.r_bits}\t{r.c_bits}\t{r.rank}\t{r.frob2:.6g}\t{r.share:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


def module_rel_diff(a: ModuleEstimate, b: ModuleEstimate) -> float:
    """``||S_a - S_b||_F / max(||S_a||_F, ||S_b||_F)`` (0 when both vanish)."""
    Sa, Sb = a.expand(), b.expand()
    den = max(np.linalg.norm(Sa), np.linalg.norm(Sb))
    return 0.0 if den == 0 else float(np.linalg.norm(Sa - Sb) / den)


@dataclass
class ProbeResult:
    max_rel_diff: np.ndarray
    tol: float

    @property
    def agree(self) -> bool:
        return bool(np.all(self.max_rel_diff <= self.tol))


def uniqueness_probe(grid, specs, n_orders=10, seed=0, tol=1e-4, opts: FitOptions | None = None) -> ProbeResult:
    """Refit under random module orders and report per-module disagreement.

    Each refit visits the modules in a different random order; the result
    is the largest pairwise :func:`module_rel_diff` for every module.
    """
    opts = opts or FitOptions(max_iter=20000, rel_tol=1e-13)
    rng = np.random.default_rng(seed)
    fits = []
    for t in range(n_orders):
        order = np.arange(len(specs)) if t == 0 else rng.permutation(len(specs))
        fits.append(fit_fixed(grid, specs, opts, order=order, check_penalties=False))
    worst = np.zeros(len(specs))
    for a in range(n_orders):
        for b in range(a + 1, n_orders):
            for k in range(len(specs)):
                worst[k] = max(worst[k], module_rel_diff(fits[a].modules[k], fits[b].modules[k]))
    return ProbeResult(worst, tol)
