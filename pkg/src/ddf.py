"""
Divergent diagnostic feedback.

Failure mode produces a five-suggestion portfolio; optimization mode produces a
completeness audit of the proposal's modules. Generators only propose content:
every report and audit is validated here and regenerated on invalid output.
Two competing agents then draw complementary subsets from the same portfolio.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

from .errors import GenerationFailure
from .models import (
    Agent,
    ErrorInfo,
    ImplementationDescriptor,
    Priority,
    Suggestion,
    SuggestionCategory,
)

logger = logging.getLogger(__name__)

PORTFOLIO_SIZE = 5
MIN_CATEGORIES = 2
PICKS_PER_AGENT = 2
LARGE_GAP = 0.02

CATEGORY_TITLES = {
    SuggestionCategory.ARCHITECTURE: "Architecture",
    SuggestionCategory.HYPERPARAMETER: "Hyperparameter",
    SuggestionCategory.CODE_FIX: "Code Fix",
    SuggestionCategory.PROPOSAL_GAP: "Proposal Gap",
}


class DiagnosticMode(str, Enum):
    FAILURE = "failure"
    OPTIMIZATION = "optimization"


class ModuleStatusLabel(str, Enum):
    FULLY_IMPLEMENTED = "fully_implemented"
    SIMPLIFIED = "simplified"
    MISSING = "missing"


_STATE_LABELS = {
    "faithful": ModuleStatusLabel.FULLY_IMPLEMENTED,
    "shortcut": ModuleStatusLabel.SIMPLIFIED,
    "substitute": ModuleStatusLabel.SIMPLIFIED,
    "absent": ModuleStatusLabel.MISSING,
}


@dataclass(frozen=True)
class DiagnosticContext:
    """Everything a generator may look at when diagnosing one trial."""

    proposal_id: str
    proposal_modules: Tuple[str, ...]
    implementation: ImplementationDescriptor
    best_metric: float
    trial_metric: Optional[float] = None
    parent_metric: Optional[float] = None
    error: Optional[ErrorInfo] = None
    history: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "proposal_id": self.proposal_id,
            "proposal_modules": list(self.proposal_modules),
            "implementation": self.implementation.to_dict(),
            "best_metric": self.best_metric,
            "trial_metric": self.trial_metric,
            "parent_metric": self.parent_metric,
            "error": self.error.to_dict() if self.error is not None else None,
            "history": self.history,
        }


@dataclass(frozen=True)
class DiagnosticReport:
    reasoning_trace: str
    suggestions: Tuple[Suggestion, ...]
    mode: DiagnosticMode = DiagnosticMode.FAILURE

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "reasoning_trace": self.reasoning_trace,
            "suggestions": [s.to_dict() for s in self.suggestions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiagnosticReport":
        return cls(
            reasoning_trace=data.get("reasoning_trace", ""),
            suggestions=tuple(Suggestion.from_dict(s) for s in data.get("suggestions", [])),
            mode=DiagnosticMode(data.get("mode", DiagnosticMode.FAILURE.value)),
        )


@dataclass(frozen=True)
class CompletenessAudit:
    module_statuses: Dict[str, ModuleStatusLabel]
    prioritized_suggestions: Tuple[Suggestion, ...] = ()
    mode: DiagnosticMode = DiagnosticMode.OPTIMIZATION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "module_statuses": {name: label.value for name, label in self.module_statuses.items()},
            "prioritized_suggestions": [s.to_dict() for s in self.prioritized_suggestions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CompletenessAudit":
        return cls(
            module_statuses={name: ModuleStatusLabel(label) for name, label in data.get("module_statuses", {}).items()},
            prioritized_suggestions=tuple(Suggestion.from_dict(s) for s in data.get("prioritized_suggestions", [])),
            mode=DiagnosticMode(data.get("mode", DiagnosticMode.OPTIMIZATION.value)),
        )


@dataclass(frozen=True)
class Verdict:
    violations: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return not self.violations


class DiagnosticGenerator(Protocol):
    def report(self, ctx: DiagnosticContext) -> DiagnosticReport:
        ...

    def audit(self, modules: Sequence[str], implementation: ImplementationDescriptor) -> CompletenessAudit:
        ...


def choose_mode(trial_metric: float, best_metric: float) -> DiagnosticMode:
    for value in (trial_metric, best_metric):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"metric must lie in [0, 1], got {value}")
    if trial_metric > best_metric:
        return DiagnosticMode.OPTIMIZATION
    return DiagnosticMode.FAILURE


def validate_report(report: DiagnosticReport) -> Verdict:
    violations = []
    count = len(report.suggestions)
    if count != PORTFOLIO_SIZE:
        violations.append(f"count: expected {PORTFOLIO_SIZE} suggestions, got {count}")
    categories = {s.category for s in report.suggestions}
    if SuggestionCategory.PROPOSAL_GAP not in categories:
        violations.append("gap: no proposal-implementation gap suggestion")
    if len(categories) < MIN_CATEGORIES:
        violations.append(f"diversity: {len(categories)} distinct categories, need {MIN_CATEGORIES}")
    return Verdict(tuple(violations))


def validate_audit(audit: CompletenessAudit, modules: Sequence[str]) -> Verdict:
    violations = []
    expected = set(modules)
    labelled = set(audit.module_statuses)
    for name in modules:
        if name not in labelled:
            violations.append(f"missing module: {name}")
    for name in sorted(labelled - expected):
        violations.append(f"unknown module: {name}")
    ranks = [s.priority.rank for s in audit.prioritized_suggestions]
    if ranks != sorted(ranks):
        violations.append("suggestions not ordered by priority")
    return Verdict(tuple(violations))


def generate_diagnosis(ctx: DiagnosticContext, g: DiagnosticGenerator, max_retries: int = 3) -> DiagnosticReport:
    """Ask `g` for a failure report, retrying up to `max_retries` times on invalid output."""
    violations: List[str] = []
    for attempt in range(max_retries + 1):
        try:
            report = g.report(ctx)
        except (ValueError, KeyError, TypeError) as e:
            violations = [f"malformed output: {e}"]
        else:
            verdict = validate_report(report)
            if verdict.valid:
                return report
            violations = list(verdict.violations)
        if attempt < max_retries:
            logger.warning("diagnostic report rejected attempt=%s violations=%s", attempt + 1, violations)
    raise GenerationFailure(f"No valid diagnostic report after {max_retries + 1} attempts", violations)


def generate_audit(
    modules: Sequence[str],
    implementation: ImplementationDescriptor,
    g: DiagnosticGenerator,
    max_retries: int = 3,
) -> CompletenessAudit:
    violations: List[str] = []
    for attempt in range(max_retries + 1):
        try:
            audit = g.audit(modules, implementation)
        except (ValueError, KeyError, TypeError) as e:
            violations = [f"malformed output: {e}"]
        else:
            verdict = validate_audit(audit, modules)
            if verdict.valid:
                return audit
            violations = list(verdict.violations)
        if attempt < max_retries:
            logger.warning("completeness audit rejected attempt=%s violations=%s", attempt + 1, violations)
    raise GenerationFailure(f"No valid completeness audit after {max_retries + 1} attempts", violations)


def _ranked(suggestions: Sequence[Suggestion]) -> List[int]:
    return sorted(range(len(suggestions)), key=lambda i: (suggestions[i].priority.rank, i))


def partition_suggestions(suggestions: Sequence[Suggestion], agent: Agent) -> List[Suggestion]:
    """
    Agent A takes the two highest-ranked suggestions; agent B takes the two best
    of the rest, reusing A's picks only when fewer than two remain.
    """
    order = _ranked(suggestions)
    first = order[:PICKS_PER_AGENT]
    if agent is Agent.A:
        return [suggestions[i] for i in first]
    rest = [i for i in order if i not in first][:PICKS_PER_AGENT]
    for i in first:
        if len(rest) >= PICKS_PER_AGENT:
            break
        rest.append(i)
    return [suggestions[i] for i in rest]


def select_suggestions(report: DiagnosticReport, agent: Agent) -> List[Suggestion]:
    return partition_suggestions(report.suggestions, agent)


def single_point(report: DiagnosticReport) -> Suggestion:
    """Top-ranked suggestion only; the prescription used without divergent feedback."""
    if not report.suggestions:
        raise ValueError("report has no suggestions")
    return report.suggestions[_ranked(report.suggestions)[0]]


def outcome_label(ctx: DiagnosticContext) -> str:
    """Short tag for why a trial did not improve: code_issue, regression or diminishing."""
    if ctx.error is not None:
        return "code_issue"
    if ctx.parent_metric is not None and ctx.trial_metric is not None and ctx.trial_metric < ctx.parent_metric:
        return "regression"
    return "diminishing"


class RuleBasedGenerator:
    """
    Deterministic generator reading the implementation's module states.

    Stands in for a language-model diagnostician: it sees the labelled hidden
    causes a simulator exposes instead of source code.
    """

    _FILLERS = (
        Suggestion(SuggestionCategory.CODE_FIX, "Audit data loading, label mapping and loss masking for silent bugs"),
        Suggestion(SuggestionCategory.HYPERPARAMETER, "Retune learning-rate schedule and warmup for the new modules"),
        Suggestion(SuggestionCategory.ARCHITECTURE, "Strengthen decoder skip connections around the new blocks"),
        Suggestion(SuggestionCategory.HYPERPARAMETER, "Increase patch size and augmentation strength", Priority.LOW),
        Suggestion(SuggestionCategory.ARCHITECTURE, "Add deep supervision on intermediate decoder stages", Priority.LOW),
    )

    def _lead(self, ctx: DiagnosticContext) -> Suggestion:
        if ctx.error is not None:
            return Suggestion(
                SuggestionCategory.CODE_FIX,
                f"Fix the {ctx.error.error_class.value} error before any further change: {ctx.error.message or 'see log'}",
                Priority.HIGH,
            )
        gap = ctx.best_metric - (ctx.trial_metric or 0.0)
        if gap > LARGE_GAP:
            return Suggestion(
                SuggestionCategory.ARCHITECTURE,
                f"Rework the encoder-decoder integration; trial trails the best by {gap * 100:.2f} pp",
                Priority.HIGH,
            )
        return Suggestion(
            SuggestionCategory.HYPERPARAMETER,
            "Small gap to the best; tune optimizer and regularization before structural changes",
            Priority.HIGH,
        )

    def report(self, ctx: DiagnosticContext) -> DiagnosticReport:
        suggestions = [self._lead(ctx)]
        states = ctx.implementation.module_states()
        unfaithful = [name for name in ctx.proposal_modules if states.get(name, "absent") in ("shortcut", "absent")]
        for position, name in enumerate(unfaithful):
            state = states.get(name, "absent")
            verb = "Implement the missing" if state == "absent" else "Replace the simplified"
            suggestions.append(Suggestion(
                SuggestionCategory.PROPOSAL_GAP,
                f"{verb} {name} module as specified in the proposal",
                Priority.HIGH if position == 0 else Priority.MEDIUM,
                target=name,
            ))
        if not unfaithful:
            suggestions.append(Suggestion(
                SuggestionCategory.PROPOSAL_GAP,
                "Verify implementation fidelity against every proposal module",
                Priority.LOW,
            ))
        for filler in self._FILLERS:
            if len(suggestions) >= PORTFOLIO_SIZE:
                break
            suggestions.append(filler)

        reasoning = (
            f"proposal={ctx.proposal_id} trial={ctx.trial_metric} best={ctx.best_metric:.4f} "
            f"error={ctx.error.error_class.value if ctx.error else None} unfaithful={unfaithful}"
        )
        return DiagnosticReport(reasoning_trace=reasoning, suggestions=tuple(suggestions[:PORTFOLIO_SIZE]))

    def audit(self, modules: Sequence[str], implementation: ImplementationDescriptor) -> CompletenessAudit:
        states = implementation.module_states()
        statuses = {name: _STATE_LABELS.get(states.get(name, "absent"), ModuleStatusLabel.MISSING) for name in modules}
        suggestions = []
        for name, label in statuses.items():
            if label is ModuleStatusLabel.MISSING:
                suggestions.append(Suggestion(
                    SuggestionCategory.PROPOSAL_GAP, f"Add the missing {name} module", Priority.HIGH, target=name
                ))
            elif label is ModuleStatusLabel.SIMPLIFIED:
                suggestions.append(Suggestion(
                    SuggestionCategory.PROPOSAL_GAP,
                    f"Upgrade the simplified {name} to the full design",
                    Priority.MEDIUM,
                    target=name,
                ))
        suggestions.sort(key=lambda s: s.priority.rank)
        return CompletenessAudit(module_statuses=statuses, prioritized_suggestions=tuple(suggestions))


def format_report_table(report: DiagnosticReport) -> str:
    rows = [f"{'#':<3}{'Category':<16}{'Priority':<10}Suggestion"]
    for index, s in enumerate(report.suggestions, start=1):
        rows.append(f"{index:<3}{CATEGORY_TITLES[s.category]:<16}{s.priority.value.capitalize():<10}{s.description}")
    return "\n".join(rows)


def format_audit_table(audit: CompletenessAudit) -> str:
    width = max([len("Module"), *(len(name) for name in audit.module_statuses)]) + 2
    rows = [f"{'Module':<{width}}{'Status':<19}Description"]
    notes = {s.target: s.description for s in audit.prioritized_suggestions if s.target}
    for name, label in audit.module_statuses.items():
        status = label.value.replace("_", " ").capitalize()
        rows.append(f"{name:<{width}}{status:<19}{notes.get(name, '')}".rstrip())
    return "\n".join(rows)
