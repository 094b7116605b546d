"""Synthetic linked-matrix generators, recovery metrics and the imputation experiment.

Every generator draws from its own stream ``numpy.random.default_rng([seed, rep])``
so replications are reproducible and independent of execution order.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import LinkedMatrixGrid, MissingMask
from .linalg import svd
from .penalty import ModuleSpec, lambda_for
from .solver import ModuleEstimate

EQ11_R = np.array(
    [
        [1, 1, 1, 0, 1, 0, 0],
        [1, 1, 0, 1, 0, 1, 0],
        [1, 0, 1, 1, 0, 0, 1],
    ]
)

MISSING_CLASSES = ("observed", "entry", "row", "col", "both")


def rng_for(seed, rep=0) -> np.random.Generator:
    """Independent stream for replication ``rep`` of an experiment seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(rep)])


def sparse_design(I) -> np.ndarray:
    """Module ``k`` active on row-sets ``1..k`` (``I`` modules)."""
    return np.triu(np.ones((I, I), dtype=int))


def factor_variance(s2n) -> float:
    """Variance of factor entries giving per-component signal-to-noise ``s2n``.

    Signal entries are products ``u*v`` of two independent factors, so their
    variance is the square of the factor variance: ``sigma^2 = sqrt(s2n)``.
    """
    if s2n < 0:
        raise ValueError("s2n must be non-negative")
    return float(np.sqrt(s2n))


@dataclass
class SimConfig:
    """Design of a vertically (``J = 1``) or bidimensionally linked simulation.

    Parameters
    ----------
    M, N : sequence of int
        Row-set and column-set sizes.
    R : array (I, K)
        Row-set indicators of the true modules.
    C : array (J, K), optional
        Column-set indicators; defaults to all ones.
    ranks : int or sequence of int
    s2n : float
        Per-component signal-to-noise; sets the factor variance via
        :func:`factor_variance` unless ``sigma2`` is given.
    """

    M: tuple
    N: tuple
    R: np.ndarray
    C: np.ndarray | None = None
    ranks: object = 1
    s2n: float = 1.0
    sigma2: float | None = None
    noise_sd: float = 1.0
    reps: int = 10
    seed: int = 0
    design: str = "custom"

    def __post_init__(self):
        self.M = tuple(int(m) for m in self.M)
        self.N = tuple(int(n) for n in self.N)
        self.R = np.asarray(self.R, dtype=int)
        if self.R.ndim != 2 or self.R.shape[0] != len(self.M):
            raise ValueError(f"R must have {len(self.M)} rows, got shape {self.R.shape}")
        K = self.R.shape[1]
        self.C = np.ones((len(self.N), K), dtype=int) if self.C is None else np.asarray(self.C, dtype=int)
        if self.C.shape != (len(self.N), K):
            raise ValueError(f"C must have shape {(len(self.N), K)}, got {self.C.shape}")
        ranks = [int(self.ranks)] * K if np.isscalar(self.ranks) else [int(r) for r in self.ranks]
        if len(ranks) != K:
            raise ValueError(f"need one rank per module ({K}), got {len(ranks)}")
        for k, spec in enumerate(self.specs):
            m, n = spec.rows(self.M).size, spec.cols(self.N).size
            if not 1 <= ranks[k] <= min(m, n):
                raise ValueError(f"module {k + 1} rank {ranks[k]} does not fit its {m}x{n} submatrix")
        self.ranks = tuple(ranks)
        if self.sigma2 is None:
            self.sigma2 = factor_variance(self.s2n)
        if self.noise_sd <= 0 or self.reps < 1:
            raise ValueError("noise_sd and reps must be positive")

    @property
    def I(self):
        return len(self.M)

    @property
    def J(self):
        return len(self.N)

    @property
    def K(self):
        return self.R.shape[1]

    @property
    def specs(self):
        return [
            ModuleSpec(tuple(self.R[:, k]), tuple(self.C[:, k])).with_lambda(
                lambda_for(ModuleSpec(tuple(self.R[:, k]), tuple(self.C[:, k])), self.M, self.N)
            )
            for k in range(self.K)
        ]

    @classmethod
    def eq11(cls, rank=1, s2n=1.0, block=100, n=100, **kw):
        """Three row-sets: one global, three pairwise and three individual modules."""
        return cls((block,) * 3, (n,), EQ11_R, ranks=rank, s2n=s2n, design="eq11", **kw)

    @classmethod
    def sparse10(cls, rank=1, s2n=1.0, block=100, n=100, I=10, **kw):
        return cls((block,) * I, (n,), sparse_design(I), ranks=rank, s2n=s2n, design="sparse10", **kw)


def _module_from_factors(spec, U, V, M, N):
    return ModuleEstimate(spec, svd(U @ V.T).truncate(U.shape[1]), M, N)


def simulate_vertical(config: SimConfig, rep=0):
    """Draw ``X = sum_k U_k V_k^T + E`` with iid ``Normal(0, sigma^2)`` factors.

    Returns
    -------
    grid : LinkedMatrixGrid
    truth : list of ModuleEstimate
        The generated modules, in the order of ``config.R``'s columns.
    """
    rng = rng_for(config.seed, rep)
    sd = np.sqrt(config.sigma2)
    truth = []
    for spec, r in zip(config.specs, config.ranks):
        m, n = spec.rows(config.M).size, spec.cols(config.N).size
        U = rng.normal(0.0, sd, (m, r))
        V = rng.normal(0.0, sd, (n, r))
        truth.append(_module_from_factors(spec, U, V, config.M, config.N))
    signal = total_signal(truth, config.M, config.N)
    noise = rng.normal(0.0, config.noise_sd, signal.shape)
    return LinkedMatrixGrid(signal + noise, config.M, config.N), truth


def total_signal(modules, M, N) -> np.ndarray:
    total = np.zeros((sum(M), sum(N)))
    for m in modules:
        if m.factors.D.size:
            total[np.ix_(m.rows, m.cols)] += m.submatrix()
    return total


def synthetic_reference(seed=0, I=4, J=6, block=60, K=20, max_rank=3, spread=8.0) -> list:
    """A random decomposition with ``K`` distinct module specs and ranks ``1..max_rank``.

    Stands in for a fitted reference decomposition. Module signals have iid
    standard normal factors scaled by ``spread**-u`` with ``u ~ Uniform(0, 1)``,
    so a few modules dominate and the weakest sit near the detection limit.
    """
    if K > (2**I - 1) * (2**J - 1):
        raise ValueError("more modules requested than distinct specs exist")
    rng = rng_for(seed, 0)
    M, N = (block,) * I, (block,) * J
    seen, mods = set(), []
    while len(mods) < K:
        r = rng.integers(0, 2, I)
        c = rng.integers(0, 2, J)
        if not r.any() or not c.any() or (tuple(r), tuple(c)) in seen:
            continue
        seen.add((tuple(r), tuple(c)))
        spec = ModuleSpec(tuple(r), tuple(c))
        spec = spec.with_lambda(lambda_for(spec, M, N))
        rank = int(rng.integers(1, max_rank + 1))
        U = rng.standard_normal((spec.rows(M).size, rank)) * spread ** -rng.uniform()
        V = rng.standard_normal((spec.cols(N).size, rank))
        mods.append(_module_from_factors(spec, U, V, M, N))
    return mods


def simulate_bidirectional(reference, alpha=None, s2n=None, seed=0, rep=0):
    """Scale a reference decomposition by ``alpha`` and add ``Normal(0, 1)`` noise.

    Exactly one of ``alpha`` and ``s2n`` is given. With ``s2n``, ``alpha``
    is solved from the drawn noise so that
    ``var(alpha * signal) / var(noise)`` equals ``s2n``.

    Returns
    -------
    grid, truth, alpha
        ``truth`` holds the reference modules scaled by ``alpha``.
    """
    modules = reference.modules if hasattr(reference, "modules") else list(reference)
    if not modules:
        raise ValueError("reference decomposition has no modules")
    M, N = modules[0].M, modules[0].N
    signal = total_signal(modules, M, N)
    rng = rng_for(seed, rep)
    noise = rng.standard_normal(signal.shape)
    if (alpha is None) == (s2n is None):
        raise ValueError("give exactly one of alpha and s2n")
    if s2n is not None:
        v = float(np.var(signal))
        if v == 0:
            raise ValueError("reference signal is identically zero")
        alpha = float(np.sqrt(s2n * np.var(noise) / v))
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    truth = [
        ModuleEstimate(m.spec, type(m.factors)(m.factors.U, alpha * m.factors.D, m.factors.V), M, N)
        for m in modules
    ]
    return LinkedMatrixGrid(alpha * signal + noise, M, N), truth, alpha


# ---------------------------------------------------------------------------
# recovery metrics


def _dense(m):
    return m.expand() if hasattr(m, "expand") else np.asarray(m, dtype=float)


def align_modules(truth, fitted) -> list:
    """Fitted module matched to each truth module by spec, ``None`` when unmatched.

    When several fitted modules share a truth module's spec the one with
    the largest Frobenius norm is used.
    """
    out = []
    for t in truth:
        cands = [f for f in fitted if f.spec.key == t.spec.key]
        out.append(max(cands, key=lambda f: f.frob2) if cands else None)
    return out


def rse_values(truth, fitted, matching="fixed") -> np.ndarray:
    """Per-module relative squared errors ``||S - S_hat||^2 / ||S||^2``.

    ``matching='fixed'`` pairs modules by position; ``'align'`` pairs by
    spec (see :func:`align_modules`), scoring unmatched truth modules
    against zero. Truth modules with zero norm give ``nan``.
    """
    truth = list(truth)
    if matching == "fixed":
        if len(fitted) != len(truth):
            raise ValueError(f"fixed matching needs equal counts ({len(truth)} vs {len(fitted)})")
        pairs = list(zip(truth, fitted))
    elif matching == "align":
        pairs = list(zip(truth, align_modules(truth, fitted)))
    else:
        raise ValueError(f"unknown matching {matching!r}")
    out = np.full(len(truth), np.nan)
    for k, (t, f) in enumerate(pairs):
        S = _dense(t)
        denom = float(np.sum(S**2))
        if denom == 0:
            warnings.warn(f"truth module {k + 1} is zero; excluded from RSE", stacklevel=2)
            continue
        Sh = np.zeros_like(S) if f is None else _dense(f)
        out[k] = float(np.sum((S - Sh) ** 2)) / denom
    return out


def rse_per_module(truth, fitted, matching="fixed") -> float:
    """Mean of :func:`rse_values` over truth modules with nonzero norm."""
    vals = rse_values(truth, fitted, matching)
    return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")


def rosr(truth, fitted) -> float:
    """Relative overall signal recovery ``||sum S_hat - sum S||^2 / ||sum S||^2``."""
    S = sum(_dense(t) for t in truth)
    Sh = sum(_dense(f) for f in fitted) if len(fitted) else np.zeros_like(S)
    denom = float(np.sum(S**2))
    if denom == 0:
        raise ValueError("total true signal is zero")
    return float(np.sum((S - Sh) ** 2)) / denom


def specs_match(truth, fitted) -> bool:
    """True when the nonzero fitted specs equal the truth specs as sets."""
    fit = {f.spec.key for f in fitted if f.factors.D.size and f.factors.D[0] > 0}
    return fit == {t.spec.key for t in truth}


# ---------------------------------------------------------------------------
# imputation experiment


def holdout_mask(grid, rows=0, cols=0, entries=0, rng=None) -> MissingMask:
    """Hold out whole rows, whole columns and single cells within every block.

    For each block, ``rows`` of its rows and ``cols`` of its columns are
    removed entirely, then ``entries`` further cells are drawn from the
    cells that remain.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    miss = np.zeros(grid.shape, dtype=bool)
    for i in range(grid.I):
        for j in range(grid.J):
            m, n = grid.M[i], grid.N[j]
            if rows >= m or cols >= n:
                raise ValueError(
                    f"holding out {rows} rows and {cols} columns exhausts block ({i + 1},{j + 1}) of size {m}x{n}"
                )
            sub = np.zeros((m, n), dtype=bool)
            sub[rng.choice(m, rows, replace=False), :] = True
            sub[:, rng.choice(n, cols, replace=False)] = True
            free = np.flatnonzero(~sub)
            if entries > free.size:
                raise ValueError(f"block ({i + 1},{j + 1}) has only {free.size} cells left for {entries} entries")
            sub.flat[rng.choice(free, entries, replace=False)] = True
            miss[grid.row_slice(i), grid.col_slice(j)] = sub
    return MissingMask(miss, grid.M, grid.N)


def class_rse(X, X_hat, mask: MissingMask) -> dict:
    """``sum (X - X_hat)^2 / sum X^2`` over each missingness class."""
    classes = mask.classify()
    sel = {"observed": ~mask.missing, **classes}
    out = {}
    for name in MISSING_CLASSES:
        s = sel[name]
        denom = float(np.sum(X[s] ** 2))
        out[name] = float(np.sum((X[s] - X_hat[s]) ** 2)) / denom if s.any() and denom > 0 else float("nan")
    return out


@dataclass
class ImputationTable:
    methods: list
    rse: dict = field(default_factory=dict)

    def format(self) -> str:
        lines = ["method\t" + "\t".join(MISSING_CLASSES)]
        for m in self.methods:
            lines.append(m + "\t" + "\t".join(f"{self.rse[m][c]:.3f}" for c in MISSING_CLASSES))
        return "\n".join(lines) + "\n"


def imputation_experiment(grid, rows=0, cols=0, entries=0, methods=("bidifac",), specs=None,
                          opts=None, seed=0, rep=0) -> ImputationTable:
    """Hold out cells, impute them with each method and score every missingness class.

    ``grid`` should be centered; RSE is measured against its values.
    ``specs`` is a module list or an adaptive budget for the ``bidifac``
    method (default: all modules when few enough, otherwise budget 10).
    """
    from .imputation import impute, impute_baseline
    from .penalty import enumerate_modules, module_count

    rng = rng_for(seed, rep)
    mask = holdout_mask(grid, rows, cols, entries, rng)
    if specs is None:
        specs = enumerate_modules(grid.I, grid.J) if module_count(grid.I, grid.J) <= 64 else 10
    X = grid.data
    table = ImputationTable(list(methods))
    for method in methods:
        if method == "bidifac":
            res = impute(grid, mask, specs, opts)
            X_hat = res.decomposition.signal()
        else:
            res = impute_baseline(grid, mask, method, opts, rng=rng)
            X_hat = res.fitted
        table.rse[method] = class_rse(X, X_hat, mask)
    return table
