"""Diagnostic feedback policy resource, also sent to remote diagnostic generators."""
from ..config import mcp

DIAGNOSTIC_POLICY_TEXT = """
DIAGNOSTIC FEEDBACK POLICY
==========================

A diagnostic runs after every committed trial. Which output is expected depends
on how the trial compares with the best result so far (the baseline counts as
the first best result).

FAILURE MODE (trial did not beat the best, or failed to run)
------------------------------------------------------------
Return exactly FIVE suggestions. Each suggestion has:
  - category: one of architecture, hyperparameter, code_fix, proposal_gap
  - description: one concrete, actionable change (never empty)
  - priority: high, medium or low
  - target (optional): the proposal module the suggestion concerns

Portfolio rules:
1) At least ONE suggestion must audit the gap between the proposal and the
   implementation (category proposal_gap). Name the module in `target`.
2) The five suggestions must span at least TWO categories.
3) Order matters only within a priority level: earlier suggestions are
   taken first.
4) For a run error, lead with a high-priority code_fix for the error class.

Two agents draw from the same portfolio: the first takes the two highest
ranked suggestions, the second the next two. Write suggestions that can be
pursued independently.

OPTIMIZATION MODE (trial beat the best)
---------------------------------------
Return a completeness audit instead:
  - module_statuses: every proposal module exactly once, labelled
    fully_implemented, simplified or missing
  - prioritized_suggestions: fixes for simplified or missing modules,
    ordered from high to low priority (the list may be empty)

Invalid output is rejected and requested again, up to a fixed retry budget.
"""


@mcp.resource(
    uri="policy://diagnostics",
    name="Diagnostic Policy",
    description="Rules for five-suggestion diagnostic portfolios and completeness audits.",
)
def get_diagnostic_policy() -> str:
    """
    Provides the diagnostic feedback policy.
    A client or LLM acting as diagnostician should load this resource before
    producing a report or an audit.
    """
    return DIAGNOSTIC_POLICY_TEXT
