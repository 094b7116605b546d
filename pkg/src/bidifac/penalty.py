"""Module bookkeeping: enumeration, penalty weights and penalty-condition checks.

A module is identified by a binary row-set indicator ``r_incl`` (length
``I``) and column-set indicator ``c_incl`` (length ``J``). Bit strings
written to text put row-set 1 (column-set 1) first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_MODULE_CAP = 4096


@dataclass(frozen=True)
class ModuleSpec:
    r_incl: tuple
    c_incl: tuple
    lam: float | None = None

    def __post_init__(self):
        r = tuple(int(x) for x in self.r_incl)
        c = tuple(int(x) for x in self.c_incl)
        if any(x not in (0, 1) for x in r + c):
            raise ValueError("inclusion vectors must be binary")
        if not any(r) or not any(c):
            raise ValueError(f"module with rows {r} and columns {c} is empty")
        if self.lam is not None and not self.lam > 0:
            raise ValueError(f"module penalty must be positive, got {self.lam}")
        object.__setattr__(self, "r_incl", r)
        object.__setattr__(self, "c_incl", c)

    @property
    def key(self):
        return (self.r_incl, self.c_incl)

    @property
    def r_bits(self) -> str:
        return "".join(map(str, self.r_incl))

    @property
    def c_bits(self) -> str:
        return "".join(map(str, self.c_incl))

    def with_lambda(self, lam) -> "ModuleSpec":
        return replace(self, lam=float(lam))

    def contains(self, other: "ModuleSpec") -> bool:
        """True when ``other``'s row and column sets are subsets of this module's."""
        return all(a >= b for a, b in zip(self.r_incl, other.r_incl)) and all(
            a >= b for a, b in zip(self.c_incl, other.c_incl)
        )

    def rows(self, M) -> np.ndarray:
        """Global row indices of the active submatrix for row-set sizes ``M``."""
        off = np.concatenate([[0], np.cumsum(M)])
        return np.concatenate(
            [np.arange(off[i], off[i + 1]) for i, on in enumerate(self.r_incl) if on]
        ).astype(int)

    def cols(self, N) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum(N)])
        return np.concatenate(
            [np.arange(off[j], off[j + 1]) for j, on in enumerate(self.c_incl) if on]
        ).astype(int)

    def __str__(self):
        lam = "" if self.lam is None else f" lam={self.lam:.6g}"
        return f"Module(r={self.r_bits}, c={self.c_bits}{lam})"


def _bits(value, width):
    return tuple((value >> b) & 1 for b in range(width))


def module_count(I, J) -> int:
    return (2**I - 1) * (2**J - 1)


def enumerate_modules(I, J, cap=DEFAULT_MODULE_CAP) -> list:
    """All ``(2^I - 1)(2^J - 1)`` nonempty modules.

    Module ``k = 1..K`` takes rows from the ``I``-digit binary expansion of
    ``(k mod (2^I - 1)) + 1`` and columns from that of ``ceil(k / (2^I - 1))``,
    least significant bit first.
    """
    if I < 1 or J < 1:
        raise ValueError("I and J must be positive")
    K = module_count(I, J)
    if K > cap:
        raise ValueError(
            f"{K} modules exceed the enumeration cap of {cap}; use adaptive module selection instead"
        )
    nr = 2**I - 1
    return [
        ModuleSpec(_bits(k % nr + 1, I), _bits(-(-k // nr), J)) for k in range(1, K + 1)
    ]


def lambda_for(spec: ModuleSpec, M, N) -> float:
    """``sqrt(active rows) + sqrt(active columns)`` for the module's submatrix."""
    if len(spec.r_incl) != len(M) or len(spec.c_incl) != len(N):
        raise ValueError("module dimensions do not match the grid")
    m = sum(int(Mi) * r for Mi, r in zip(M, spec.r_incl))
    n = sum(int(Nj) * c for Nj, c in zip(N, spec.c_incl))
    return math.sqrt(m) + math.sqrt(n)


def with_default_lambdas(specs, M, N, overwrite=False) -> list:
    return [
        s if (s.lam is not None and not overwrite) else s.with_lambda(lambda_for(s, M, N))
        for s in specs
    ]


@dataclass(frozen=True)
class PenaltyViolation:
    condition: int
    module: int
    others: tuple
    message: str

    def __str__(self):
        return self.message


def _is_cover(family, target, specs):
    """Family sums to positive integer multiples of the target's row and column indicators."""
    t = specs[target]
    rsum = np.sum([specs[f].r_incl for f in family], axis=0)
    csum = np.sum([specs[f].c_incl for f in family], axis=0)
    r_on, c_on = np.array(t.r_incl, bool), np.array(t.c_incl, bool)
    if rsum[~r_on].any() or csum[~c_on].any():
        return False
    rv, cv = rsum[r_on], csum[c_on]
    return rv[0] > 0 and cv[0] > 0 and (rv == rv[0]).all() and (cv == cv[0]).all()


def check_penalty_conditions(specs, max_family=4) -> list:
    """Report violations of the necessary conditions on module penalties.

    Condition 1: a module nested in another must carry a strictly smaller
    penalty. Condition 2: a module's penalty must be strictly smaller than
    the summed penalties of any family of other modules covering it evenly.
    Covering families are searched exhaustively up to ``max_family``
    members (pruned once the running penalty sum exceeds the target's),
    plus the partitions into single-row-set, single-column-set and
    single-block modules when those modules are present. At most the
    partition families and one searched family are reported per module,
    since violating families can be combinatorially many.
    """
    specs = list(specs)
    if any(s.lam is None for s in specs):
        raise ValueError("all modules need a penalty before checking conditions")
    if len({(len(s.r_incl), len(s.c_incl)) for s in specs}) > 1:
        raise ValueError("modules do not share the same I, J")
    out = []
    lams = [s.lam for s in specs]
    for k, sk in enumerate(specs):
        for k2, s2 in enumerate(specs):
            if k2 != k and sk.contains(s2) and not lams[k] > lams[k2]:
                out.append(
                    PenaltyViolation(
                        1, k, (k2,),
                        f"condition 1: {s2} is nested in module {k} {sk} but lam {lams[k2]:.6g} >= {lams[k]:.6g}",
                    )
                )

    index = {s.key: i for i, s in enumerate(specs)}
    for k, sk in enumerate(specs):
        lam_k = lams[k]
        nested = sorted(
            (j for j in range(len(specs)) if j != k and sk.contains(specs[j])), key=lambda j: (lams[j], j)
        )
        seen = set()

        def report(family):
            """Record ``family`` if it violates condition 2; True when it does."""
            fam = tuple(sorted(family))
            if fam in seen:
                return False
            seen.add(fam)
            total = sum(lams[j] for j in fam)
            if lam_k < total:
                return False
            out.append(
                PenaltyViolation(
                    2, k, fam,
                    f"condition 2: module {k} {sk} has lam {lam_k:.6g} >= {total:.6g}, "
                    f"the summed penalty of covering modules {list(fam)}",
                )
            )
            return True

        def dfs(start, family, lam_sum):
            for pos in range(start, len(nested)):
                j = nested[pos]
                s = lam_sum + lams[j]
                if s > lam_k:
                    break  # sorted by penalty: every later extension is larger still
                fam = family + [j]
                if _is_cover(fam, k, specs) and report(fam):
                    return True
                if len(fam) < max_family and dfs(pos + 1, fam, s):
                    return True
            return False

        I, J = len(sk.r_incl), len(sk.c_incl)
        rows = [i for i in range(I) if sk.r_incl[i]]
        cols = [j for j in range(J) if sk.c_incl[j]]
        unit = lambda idx, n: tuple(int(t == idx) for t in range(n))
        partitions = [
            [(unit(i, I), sk.c_incl) for i in rows],
            [(sk.r_incl, unit(j, J)) for j in cols],
            [(unit(i, I), unit(j, J)) for i in rows for j in cols],
        ]
        hit = False
        for part in partitions:
            fam = [index.get(key) for key in part]
            if None in fam or k in fam:
                continue
            hit = report(fam) or hit
        if not hit:
            dfs(0, [], 0.0)
    return out


def format_module_table(specs) -> str:
    """One line per module: row bits, column bits, penalty (tab separated)."""
    lines = ["r_bits\tc_bits\tlambda"]
    for s in specs:
        lam = "NA" if s.lam is None else format(s.lam, ".17g")
        lines.append(f"{s.r_bits}\t{s.c_bits}\t{lam}")
    return "\n".join(lines) + "\n"


def parse_module_table(text) -> list:
    specs = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("r_bits"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"bad module table line: {raw!r}")
        lam = None if len(parts) == 2 or parts[2] == "NA" else float(parts[2])
        specs.append(ModuleSpec(tuple(map(int, parts[0])), tuple(map(int, parts[1])), lam))
    return specs


def save_modules(specs, path):
    with open(path, "w") as fh:
        fh.write(format_module_table(specs))


def load_modules(path) -> list:
    with open(path) as fh:
        return parse_module_table(fh.read())
