"""EM imputation of missing cells with fitted low-rank structure.

Missing cells start at zero (the data are assumed centered). Each EM
iteration refits the model to the completed grid (M-step, warm-started
from the previous fit) and then overwrites the missing cells with the
fitted signal (E-step). Observed cells are never modified.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import LinkedMatrixGrid, MissingMask
from .linalg import soft_svd, svd
from .solver import Decomposition, FitOptions, fit_adaptive, fit_fixed

log = logging.getLogger(__name__)

BASELINES = ("soft-joint", "soft-separate", "hard-joint", "hard-separate")


@dataclass
class EmSettings:
    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        if not 0 < self.tol < 1 or self.max_iter < 1:
            raise ValueError("EM tolerance must lie in (0, 1) and max_iter be positive")


@dataclass
class ImputeResult:
    """Completed grid and final fit; unpacks as ``(completed, decomposition)``."""

    completed: LinkedMatrixGrid
    decomposition: Decomposition
    iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.completed, self.decomposition))


@dataclass
class BaselineResult:
    completed: LinkedMatrixGrid
    fitted: np.ndarray
    method: str
    ranks: object = None
    iterations: int = 0
    converged: bool = False


def _missing(grid, mask) -> np.ndarray:
    miss = np.isnan(grid.data)
    if mask is not None:
        m = mask.missing if isinstance(mask, MissingMask) else np.asarray(mask, dtype=bool)
        if m.shape != grid.shape:
            raise ValueError(f"mask shape {m.shape} does not match grid shape {grid.shape}")
        miss = miss | m
    if not miss.any():
        raise ValueError("nothing to impute: the mask is empty")
    for i in range(grid.I):
        for j in range(grid.J):
            if miss[grid.row_slice(i), grid.col_slice(j)].all():
                raise ValueError(f"block ({i + 1},{j + 1}) is entirely missing; it carries no information")
    return miss


def _rel_change(new, old) -> float:
    den = float(np.linalg.norm(old))
    num = float(np.linalg.norm(new - old))
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return num / den


def impute(grid, mask, specs_or_budget, opts: FitOptions | None = None, em: EmSettings | None = None):
    """Impute missing cells with a structured nuclear-norm fit.

    Parameters
    ----------
    grid : LinkedMatrixGrid
        Centered (and scaled) data; ``NaN`` cells count as missing.
    mask : MissingMask or bool array or None
        Extra cells to treat as missing.
    specs_or_budget : list of ModuleSpec or int
        Fixed module specs, or the module budget for adaptive selection.
    opts : FitOptions
        Passed to every M-step.
    em : EmSettings
        Outer-loop tolerance on the relative change of the imputed values.

    Returns
    -------
    ImputeResult
    """
    opts = opts or FitOptions()
    em = em or EmSettings()
    miss = _missing(grid, mask)
    cur = np.where(miss, 0.0, np.nan_to_num(grid.data))
    adaptive = isinstance(specs_or_budget, (int, np.integer))
    decomp = None
    trace = []
    converged = False
    it = 0
    for it in range(1, em.max_iter + 1):
        g = LinkedMatrixGrid(cur, grid.M, grid.N, grid.row_labels, grid.col_labels)
        if adaptive:
            decomp = fit_adaptive(g, int(specs_or_budget), opts, init=decomp)
        else:
            decomp = fit_fixed(g, specs_or_budget, opts, init=decomp)
        fitted = decomp.signal()
        change = _rel_change(fitted[miss], cur[miss])
        cur[miss] = fitted[miss]
        pen = sum(m.lam * m.nuclear_norm for m in decomp.modules)
        trace.append(0.5 * float(np.sum((cur - fitted) ** 2)) + pen)
        if change < em.tol:
            converged = True
            break
    if not converged:
        log.info("EM stopped after %d iterations without reaching tol=%g", it, em.tol)
    completed = LinkedMatrixGrid(cur, grid.M, grid.N, grid.row_labels, grid.col_labels)
    return ImputeResult(completed, decomp, it, converged, trace)


# ---------------------------------------------------------------------------
# single-matrix baselines


def _soft_fit(lam):
    return lambda Y: soft_svd(Y, lam).matrix()


def _hard_fit(rank):
    def fit(Y):
        if rank == 0:
            return np.zeros_like(Y)
        return svd(Y, rank=rank).matrix()

    return fit


def _em_matrix(X, miss, fit, em: EmSettings):
    """EM on one matrix with M-step ``fit``; returns (fitted, completed, iterations, converged)."""
    cur = np.where(miss, 0.0, X)
    fitted = np.zeros_like(cur)
    for it in range(1, em.max_iter + 1):
        fitted = fit(cur)
        change = _rel_change(fitted[miss], cur[miss])
        cur[miss] = fitted[miss]
        if change < em.tol:
            return fitted, cur, it, True
    return fitted, cur, em.max_iter, False


def choose_hard_rank(X, miss, rank_max=20, rng=None, em: EmSettings | None = None) -> int:
    """Rank minimising the error on an extra held-out set of observed cells.

    The extra set has as many cells as ``miss`` (a tenth of the matrix when
    nothing is missing) and is drawn from the observed cells; ties go to
    the lower rank.
    """
    em = em or EmSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    obs = np.flatnonzero(~miss)
    n_cv = min(int(miss.sum()) or max(1, miss.size // 10), obs.size - 1)
    if n_cv < 1:
        return 0
    cv = np.zeros(X.shape, dtype=bool)
    cv.flat[rng.choice(obs, n_cv, replace=False)] = True
    errs = []
    for r in range(0, min(rank_max, *X.shape) + 1):
        fitted = _em_matrix(X, miss | cv, _hard_fit(r), em)[0]
        errs.append(float(np.sum((X[cv] - fitted[cv]) ** 2)))
    return int(np.argmin(errs))


def _zero_empty_lines(fitted, miss):
    """Rows and columns with no observed cell get exactly zero."""
    fitted[miss.all(axis=1), :] = 0.0
    fitted[:, miss.all(axis=0)] = 0.0
    return fitted


def impute_baseline(grid, mask, method, opts=None, em: EmSettings | None = None, rank_max=20, rng=None):
    """Impute with a single-matrix soft- or hard-thresholded SVD.

    ``*-joint`` methods fit the whole concatenated grid, ``*-separate``
    methods fit each block on its own. Soft methods use the penalty
    ``sqrt(m) + sqrt(n)`` of the fitted matrix; hard methods pick their
    rank by :func:`choose_hard_rank` (per block for ``hard-separate``).
    ``opts`` is accepted for interface symmetry and unused.
    """
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}; choose from {', '.join(BASELINES)}")
    em = em or EmSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    miss = _missing(grid, mask)
    X = np.nan_to_num(grid.data)
    kind, scope = method.split("-")
    if scope == "joint":
        parts = [(slice(None), slice(None))]
    else:
        parts = [(grid.row_slice(i), grid.col_slice(j)) for i in range(grid.I) for j in range(grid.J)]
    fitted = np.zeros_like(X)
    completed = np.where(miss, 0.0, X)
    ranks, iters, conv = [], 0, True
    for rs, cs in parts:
        Xb, mb = X[rs, cs], miss[rs, cs]
        if kind == "soft":
            fit = _soft_fit(np.sqrt(Xb.shape[0]) + np.sqrt(Xb.shape[1]))
        else:
            r = choose_hard_rank(Xb, mb, rank_max, rng, em)
            ranks.append(r)
            fit = _hard_fit(r)
        fb, cb, it, ok = _em_matrix(Xb, mb, fit, em)
        if scope == "separate":
            fb = _zero_empty_lines(fb, mb)
            cb[mb] = fb[mb]
        fitted[rs, cs] = fb
        completed[rs, cs] = cb
        iters, conv = max(iters, it), conv and ok
    out = LinkedMatrixGrid(completed, grid.M, grid.N, grid.row_labels, grid.col_labels)
    rank_info = None if kind == "soft" else (ranks[0] if scope == "joint" else ranks)
    return BaselineResult(out, fitted, method, rank_info, iters, conv)
