"""Cross-model ranking-alignment statistics.

Given a table of per-model metric values under several in-sample mitigation
conditions plus an out-of-sample reference column, this module measures how
well each in-sample leaderboard predicts the out-of-sample one: Spearman and
Kendall correlations over every size-k model subset, a one-sided Wilcoxon
signed-rank test on the per-subset change versus baseline, and the fraction
of subsets with positive correlation.

Metric columns are converted to leaderboard positions (1 = best) before
correlating; ties are broken by row order so a leaderboard is always a total
order. The correlation functions themselves are general-purpose and handle
ties with average ranks (Spearman) and the tie-corrected tau-b (Kendall).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

IS_CONDITIONS = ("IS-B", "IS-An", "IS-PI", "IS-C")
OOS_CONDITION = "OOS"

#: Largest sample size for which the Wilcoxon null distribution is enumerated
#: exactly; above this the normal approximation (continuity + tie corrected)
#: is used.
WILCOXON_EXACT_LIMIT = 25

_ROW_COLUMNS = {"IS-B": "is_b", "IS-An": "is_an", "IS-PI": "is_pi", "IS-C": "is_c", "OOS": "oos"}


class DegenerateInputError(DataError):
    """Raised when a statistic is undefined (e.g. zero rank variance)."""


@dataclass(frozen=True)
class ModelRow:
    """One model's metric values under each condition."""

    model_id: str
    sharpe_by_condition: dict[str, float]
    sortino_by_condition: dict[str, float] | None = None

    def metric(self, name: str) -> dict[str, float]:
        if name == "sharpe":
            return self.sharpe_by_condition
        if name == "sortino":
            if self.sortino_by_condition is None:
                raise DataError(f"model {self.model_id} has no sortino columns")
            return self.sortino_by_condition
        raise DataError(f"unknown metric {name!r} (expected 'sharpe' or 'sortino')")


@dataclass(frozen=True)
class WilcoxonResult:
    """One-sided Wilcoxon signed-rank outcome."""

    p_value: float
    statistic: float
    n_nonzero: int
    method: str  # "exact" | "normal" | "degenerate"
    degenerate: bool = False


@dataclass
class AlignmentReport:
    """Subset-averaged alignment of in-sample conditions against OOS."""

    k: int
    n_subsets: int
    metric: str
    mean_rho: dict[str, float]
    mean_tau: dict[str, float]
    wilcoxon_p: dict[str, float]
    wilcoxon_degenerate: dict[str, bool]
    frac_positive: dict[str, float]
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_subsets": self.n_subsets,
            "metric": self.metric,
            "mean_rho": self.mean_rho,
            "mean_tau": self.mean_tau,
            "wilcoxon_p": self.wilcoxon_p,
            "wilcoxon_degenerate": self.wilcoxon_degenerate,
            "frac_positive": self.frac_positive,
            "n_excluded": self.n_excluded,
        }


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """Ascending ranks starting at 1; tied values share their average rank."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=float)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def leaderboard_positions(values: Sequence[float]) -> np.ndarray:
    """Positions 1..n with 1 = largest value; ties broken by earlier index."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    pos = np.empty(len(values), dtype=float)
    for p, i in enumerate(order, start=1):
        pos[i] = p
    return pos


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise DataError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DataError("need at least 2 observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    vx = float(np.dot(rx, rx))
    vy = float(np.dot(ry, ry))
    if vx == 0.0 or vy == 0.0:
        raise DegenerateInputError("zero rank variance: correlation undefined")
    return float(np.dot(rx, ry) / math.sqrt(vx * vy))


def kendall(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall tau-b: tie-corrected concordance statistic."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise DataError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise DataError("need at least 2 observations")
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = (x[i] - x[j]) * (y[i] - y[j])
            if s > 0:
                concordant += 1
            elif s < 0:
                discordant += 1
    n0 = n * (n - 1) // 2

    def tie_pairs(v: np.ndarray) -> int:
        _, counts = np.unique(v, return_counts=True)
        return int(sum(c * (c - 1) // 2 for c in counts))

    tx = tie_pairs(x)
    ty = tie_pairs(y)
    if tx == n0 or ty == n0:
        raise DegenerateInputError("zero rank variance: tau undefined")
    return (concordant - discordant) / math.sqrt((n0 - tx) * (n0 - ty))


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_one_sided(deltas: Sequence[float]) -> WilcoxonResult:
    """One-sided Wilcoxon signed-rank test of H1: median(deltas) > 0.

    Zeros are dropped. For n <= WILCOXON_EXACT_LIMIT the p-value comes from
    exact enumeration of the null sign-pattern distribution (counting over
    doubled ranks so tied average ranks stay integral); above that a normal
    approximation with continuity and tie corrections is used. All-zero
    input is degenerate and reports p = 1 with a flag.
    """
    d = np.asarray(deltas, dtype=float)
    if d.size == 0:
        raise DataError("empty delta list")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(p_value=1.0, statistic=0.0, n_nonzero=0, method="degenerate", degenerate=True)

    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= WILCOXON_EXACT_LIMIT:
        doubled = np.rint(2.0 * ranks).astype(int)
        total = int(doubled.sum())
        ways = [0] * (total + 1)
        ways[0] = 1
        for r in doubled:
            for s in range(total, r - 1, -1):
                ways[s] += ways[s - r]
        observed = int(round(2.0 * w_plus))
        count = sum(ways[observed:])
        p = count / float(2**n)
        return WilcoxonResult(p_value=p, statistic=w_plus, n_nonzero=n, method="exact")

    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(sum(c**3 - c for c in counts)) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return WilcoxonResult(p_value=_normal_sf(z), statistic=w_plus, n_nonzero=n, method="normal")


def subset_alignment(rows: Sequence[ModelRow], k: int, metric: str = "sharpe") -> AlignmentReport:
    """Exhaustive size-k subset alignment of each IS condition against OOS.

    For every subset the metric values are converted to leaderboard
    positions and correlated; per-condition Wilcoxon tests run on the
    per-subset correlation change versus baseline, one-sided in the
    direction of the observed mean change.
    """
    n = len(rows)
    if not 2 <= k <= n:
        raise DataError(f"k must be in [2, {n}], got {k}")
    for row in rows:
        values = row.metric(metric)
        missing = [c for c in (*IS_CONDITIONS, OOS_CONDITION) if c not in values]
        if missing:
            raise DataError(f"model {row.model_id} lacks conditions {missing}")

    matrix = {
        cond: np.array([row.metric(metric)[cond] for row in rows]) for cond in (*IS_CONDITIONS, OOS_CONDITION)
    }
    rho: dict[str, list[float]] = {c: [] for c in IS_CONDITIONS}
    tau: dict[str, list[float]] = {c: [] for c in IS_CONDITIONS}
    n_excluded = 0

    for subset in combinations(range(n), k):
        idx = list(subset)
        oos_pos = leaderboard_positions(matrix[OOS_CONDITION][idx])
        try:
            subset_rho = {}
            subset_tau = {}
            for cond in IS_CONDITIONS:
                is_pos = leaderboard_positions(matrix[cond][idx])
                subset_rho[cond] = spearman(is_pos, oos_pos)
                subset_tau[cond] = kendall(is_pos, oos_pos)
        except DegenerateInputError:
            n_excluded += 1
            continue
        for cond in IS_CONDITIONS:
            rho[cond].append(subset_rho[cond])
            tau[cond].append(subset_tau[cond])

    n_included = len(rho["IS-B"])
    if n_included == 0:
        raise DataError("every subset was degenerate; no correlations computed")

    baseline = np.array(rho["IS-B"])
    wilcoxon_p: dict[str, float] = {}
    wilcoxon_degenerate: dict[str, bool] = {}
    for cond in IS_CONDITIONS:
        deltas = np.array(rho[cond]) - baseline
        if np.all(deltas == 0.0):
            result = WilcoxonResult(p_value=1.0, statistic=0.0, n_nonzero=0, method="degenerate", degenerate=True)
        else:
            oriented = deltas if deltas.mean() >= 0 else -deltas
            result = wilcoxon_one_sided(oriented)
        wilcoxon_p[cond] = result.p_value
        wilcoxon_degenerate[cond] = result.degenerate

    return AlignmentReport(
        k=k,
        n_subsets=n_included,
        metric=metric,
        mean_rho={c: float(np.mean(rho[c])) for c in IS_CONDITIONS},
        mean_tau={c: float(np.mean(tau[c])) for c in IS_CONDITIONS},
        wilcoxon_p=wilcoxon_p,
        wilcoxon_degenerate=wilcoxon_degenerate,
        frac_positive={c: float(np.mean(np.array(rho[c]) > 0)) for c in IS_CONDITIONS},
        n_excluded=n_excluded,
    )


def load_model_rows(path: str | Path) -> list[ModelRow]:
    """Read a model-row CSV: model_id,is_b,is_an,is_pi,is_c,oos[,sortino_*]."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read model rows: {exc}") from exc
    return parse_model_rows(text.splitlines())


def parse_model_rows(lines: Iterable[str]) -> list[ModelRow]:
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise DataError("model-row CSV is empty")
    required = {"model_id", *_ROW_COLUMNS.values()}
    missing = required - set(reader.fieldnames)
    if missing:
        raise DataError(f"model-row CSV missing columns: {sorted(missing)}")
    has_sortino = all(f"sortino_{c}" in reader.fieldnames for c in _ROW_COLUMNS.values())
    rows = []
    for line_no, rec in enumerate(reader, start=2):
        try:
            sharpe = {cond: float(rec[col]) for cond, col in _ROW_COLUMNS.items()}
            sortino = (
                {cond: float(rec[f"sortino_{col}"]) for cond, col in _ROW_COLUMNS.items()} if has_sortino else None
            )
        except (TypeError, ValueError) as exc:
            raise DataError(f"model-row CSV line {line_no}: {exc}") from exc
        rows.append(ModelRow(model_id=rec["model_id"], sharpe_by_condition=sharpe, sortino_by_condition=sortino))
    if not rows:
        raise DataError("model-row CSV has a header but no rows")
    return rows


def bundled_model_rows() -> list[ModelRow]:
    """The eleven-model Sharpe leaderboard shipped with the package."""
    text = resources.files("fincad.data").joinpath("model_sharpe_table.csv").read_text()
    return parse_model_rows(text.splitlines())


def write_scatter_csv(rows: Sequence[ModelRow], path: str | Path, metric: str = "sharpe") -> None:
    """Emit (model_id, is_metric, oos_metric, condition) scatter-plot data."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "is_metric", "oos_metric", "condition"])
        for cond in IS_CONDITIONS:
            for row in rows:
                values = row.metric(metric)
                writer.writerow([row.model_id, values[cond], values[OOS_CONDITION], cond])
