"""
Statistics over runs: binomial and Wilson summaries of win counts, paired
Wilcoxon signed-rank tests, Bonferroni thresholds, first-success positions,
budget curves, correlation and cross-run concordance.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.stats import binom, norm, rankdata

from .errors import DegenerateSampleError

logger = logging.getLogger(__name__)

EXACT_LIMIT = 25
ALTERNATIVES = ("two-sided", "greater", "less")
METHODS = ("auto", "exact", "approx")


def binomial_test_one_sided(k: int, n: int, p0: float = 0.5) -> float:
    """P(X >= k) for X ~ Binomial(n, p0)."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    if k == 0:
        return 1.0
    return float(binom.sf(k - 1, n, p0))


def wilson_ci(k: int, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    z = float(norm.ppf(1.0 - (1.0 - confidence) / 2.0))
    p_hat = k / n
    denominator = 1 + z ** 2 / n
    center = (p_hat + z ** 2 / (2 * n)) / denominator
    margin = (z / denominator) * math.sqrt(p_hat * (1 - p_hat) / n + z ** 2 / (4 * n ** 2))
    return max(0.0, center - margin), min(1.0, center + margin)


def bonferroni_threshold(alpha: float, m: int) -> float:
    if m < 1:
        raise ValueError("m must be at least 1")
    return alpha / m


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedSamples:
    pairs: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("paired samples need at least one pair")

    @classmethod
    def from_columns(cls, a: Sequence[float], b: Sequence[float]) -> "PairedSamples":
        if len(a) != len(b):
            raise ValueError(f"columns differ in length: {len(a)} vs {len(b)}")
        return cls(tuple((float(x), float(y)) for x, y in zip(a, b)))

    def differences(self) -> np.ndarray:
        return np.array([x - y for x, y in self.pairs], dtype=float)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    method: str
    n: int
    alternative: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _exact_tails(doubled_ranks: np.ndarray, observed: int) -> Tuple[float, float]:
    """P(T >= observed) and P(T <= observed) under the sign-flip null, on doubled ranks."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for rank in doubled_ranks:
        shifted = np.zeros_like(dist)
        shifted[rank:] = dist[: total + 1 - rank]
        dist = 0.5 * (dist + shifted)
    return float(dist[observed:].sum()), float(dist[: observed + 1].sum())


def wilcoxon_signed_rank(
    samples: PairedSamples, alternative: str = "two-sided", method: str = "auto"
) -> WilcoxonResult:
    """
    Signed-rank test on a - b. Zero differences are dropped and tied magnitudes
    get mid-ranks. The statistic is the sum of positive ranks. Up to 25 nonzero
    differences the null distribution is enumerated exactly; above that a normal
    approximation with tie and continuity corrections is used.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")

    d = samples.differences()
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateSampleError("all paired differences are zero")

    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    use_exact = method == "exact" or (method == "auto" and n <= EXACT_LIMIT)

    if use_exact:
        doubled = np.rint(2 * ranks).astype(int)
        upper, lower = _exact_tails(doubled, int(round(2 * t_plus)))
        tag = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(np.abs(d), return_counts=True)
        variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(((counts ** 3) - counts).sum()) / 48.0
        if variance <= 0:
            raise DegenerateSampleError("zero variance under the null")
        sd = math.sqrt(variance)
        upper = float(norm.sf((t_plus - mean - 0.5) / sd))
        lower = float(norm.cdf((t_plus - mean + 0.5) / sd))
        tag = "approx"

    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = 2.0 * min(upper, lower)
    return WilcoxonResult(statistic=t_plus, p_value=min(1.0, p), method=tag, n=n, alternative=alternative)


# ---------------------------------------------------------------------------
# Run-level measures
# ---------------------------------------------------------------------------

def _field(record: Any, name: str) -> Any:
    if isinstance(record, Mapping):
        return record.get(name)
    return getattr(record, name)


def first_success_position(record: Any) -> Optional[int]:
    """1-based position among non-Baseline trials of the first trial above the baseline Dice."""
    for position, node in enumerate(record.trials, start=1):
        if node.metrics is not None and node.metrics.dice > record.m0:
            return position
    return None


@dataclass(frozen=True)
class WinCurve:
    points: Tuple[Tuple[int, float], ...]

    def rate(self, budget: int) -> float:
        for n, rate in self.points:
            if n == budget:
                return rate
        raise KeyError(budget)


def cumulative_win_curve(records: Sequence[Any], budgets: Iterable[int]) -> WinCurve:
    """Fraction of records whose first success lies within each node budget."""
    fsps = [_field(r, "fsp") for r in records]
    points = []
    for budget in sorted(set(budgets)):
        if not fsps:
            points.append((budget, 0.0))
            continue
        hits = sum(1 for f in fsps if f is not None and f <= budget)
        points.append((budget, hits / len(fsps)))
    return WinCurve(tuple(points))


def union_win_curve(records_a: Sequence[Any], records_b: Sequence[Any], budgets: Iterable[int]) -> WinCurve:
    """Per-dataset union of two runs: a dataset counts once either run has succeeded."""
    best: Dict[str, Optional[int]] = {}
    for record in list(records_a) + list(records_b):
        dataset = _field(record, "dataset_id")
        fsp = _field(record, "fsp")
        current = best.get(dataset)
        if dataset not in best or (fsp is not None and (current is None or fsp < current)):
            best[dataset] = fsp
    return cumulative_win_curve([{"fsp": f} for f in best.values()], budgets)


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise ValueError("xs and ys differ in length")
    if len(xs) < 2:
        raise ValueError("need at least two pairs")
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateSampleError("zero variance")
    return float(np.corrcoef(x, y)[0, 1])


@dataclass(frozen=True)
class ConcordanceTable:
    both: int
    only_a: int
    only_b: int
    neither: int
    union: int

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def cross_run_concordance(wins_a: Set[Any], wins_b: Set[Any], universe: Set[Any]) -> ConcordanceTable:
    wins_a, wins_b, universe = set(wins_a), set(wins_b), set(universe)
    if not wins_a <= universe or not wins_b <= universe:
        raise ValueError("win sets must be subsets of the universe")
    both = len(wins_a & wins_b)
    only_a = len(wins_a - wins_b)
    only_b = len(wins_b - wins_a)
    return ConcordanceTable(
        both=both,
        only_a=only_a,
        only_b=only_b,
        neither=len(universe - wins_a - wins_b),
        union=both + only_a + only_b,
    )


# ---------------------------------------------------------------------------
# Ablation comparisons
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantSummary:
    variant: str
    runs: int
    wins: int
    mean_delta_dice_pp: Optional[float]
    mean_fsp: Optional[float]
    mean_nodes: float

    @property
    def win_rate(self) -> float:
        return self.wins / self.runs if self.runs else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["win_rate"] = self.win_rate
        return data


def _is_win(value: Any) -> bool:
    value = getattr(value, "value", value)
    return value not in (None, "", "no_win")


def ablation_summary(rows: Sequence[Mapping[str, Any]]) -> List[VariantSummary]:
    """
    Per variant: runs, wins, mean Dice gain over the baseline in percentage
    points, mean first-success position over winning runs and mean node count.
    """
    grouped: Dict[str, List[Mapping[str, Any]]] = {}
    for row in rows:
        grouped.setdefault(str(row["variant"]), []).append(row)

    summaries = []
    for variant, group in grouped.items():
        wins = [r for r in group if _is_win(r["win"])]
        deltas = [float(r["delta_dice"]) for r in group if r.get("delta_dice") is not None]
        fsps = [int(r["fsp"]) for r in wins if r.get("fsp") is not None]
        summaries.append(VariantSummary(
            variant=variant,
            runs=len(group),
            wins=len(wins),
            mean_delta_dice_pp=100 * float(np.mean(deltas)) if deltas else None,
            mean_fsp=float(np.mean(fsps)) if fsps else None,
            mean_nodes=float(np.mean([int(r["nodes"]) for r in group])),
        ))
    return summaries


def paired_fsp_test(full: Sequence[Any], other: Sequence[Any], budget: int) -> WilcoxonResult:
    """
    One-sided signed-rank test that `other` needs more trials than `full` to
    succeed. Runs are paired by seed; a run without success counts as budget + 1.
    """
    def by_seed(records: Sequence[Any]) -> Dict[Any, int]:
        table = {}
        for r in records:
            fsp = _field(r, "fsp")
            table[_field(r, "seed")] = int(fsp) if fsp is not None else budget + 1
        return table

    a, b = by_seed(other), by_seed(full)
    seeds = sorted(set(a) & set(b))
    if not seeds:
        raise ValueError("no seeds shared by the two groups")
    return wilcoxon_signed_rank(
        PairedSamples.from_columns([a[s] for s in seeds], [b[s] for s in seeds]), alternative="greater"
    )
