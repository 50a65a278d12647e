"""Statistical MCP tools."""
from typing import Any, Dict, List

from ..config import mcp
from ..stats import (
    PairedSamples,
    binomial_test_one_sided,
    bonferroni_threshold as bonferroni,
    wilcoxon_signed_rank,
    wilson_ci,
)


@mcp.tool()
def binomial_test(k: int, n: int, p0: float = 0.5) -> Dict[str, Any]:
    """
    One-sided exact binomial test: probability of at least k successes in n trials.

    Example Usage:
    --------------
        "Is 22 wins out of 31 datasets better than a coin flip?" -> binomial_test(22, 31)
    """
    return {"k": k, "n": n, "p0": p0, "p_value": binomial_test_one_sided(k, n, p0)}


@mcp.tool()
def wilson_interval(k: int, n: int, confidence: float = 0.95) -> Dict[str, Any]:
    """
    Wilson score confidence interval for a win rate k/n.

    Returns:
    --------
    Dict[str, Any]
        rate, lower and upper bounds as fractions in [0, 1].
    """
    lower, upper = wilson_ci(k, n, confidence)
    return {"rate": k / n, "lower": lower, "upper": upper, "confidence": confidence}


@mcp.tool()
def bonferroni_threshold(alpha: float, m: int) -> float:
    """Per-test significance threshold after a Bonferroni correction for m tests."""
    return bonferroni(alpha, m)


@mcp.tool()
def wilcoxon_test(a: List[float], b: List[float], alternative: str = "two-sided") -> Dict[str, Any]:
    """
    Paired Wilcoxon signed-rank test on a - b.

    Parameters:
    -----------
    a, b : List[float]
        Paired samples of equal length, e.g. per-case Dice of a method and its baseline.
    alternative : str
        two-sided, greater (a tends to exceed b) or less.

    Returns:
    --------
    Dict[str, Any]
        statistic (sum of positive ranks), p_value, method (exact or approx),
        n (nonzero differences) and alternative.
    """
    return wilcoxon_signed_rank(PairedSamples.from_columns(a, b), alternative=alternative).to_dict()
