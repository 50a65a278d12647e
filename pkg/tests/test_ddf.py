import itertools
import logging

import pytest

from src.ddf import (
    CompletenessAudit,
    DiagnosticContext,
    DiagnosticMode,
    DiagnosticReport,
    ModuleStatusLabel,
    RuleBasedGenerator,
    choose_mode,
    format_audit_table,
    format_report_table,
    generate_audit,
    generate_diagnosis,
    outcome_label,
    partition_suggestions,
    select_suggestions,
    single_point,
    validate_audit,
    validate_report,
)
from src.errors import GenerationFailure
from src.models import Agent, ErrorClass, ErrorInfo, ImplementationDescriptor, Priority, Suggestion, SuggestionCategory

CATS = list(SuggestionCategory)
MODULES = ("hierarchical_tokenizer", "hierarchy_embedding", "fusion_head")
IMPL = ImplementationDescriptor(
    proposal_id="hierarchical_token_fusion",
    modules=(("hierarchical_tokenizer", "shortcut"), ("hierarchy_embedding", "absent"), ("fusion_head", "faithful")),
)


def suggestion(category, priority=Priority.MEDIUM, text="do something"):
    return Suggestion(category, text, priority)


def report_of(categories, priorities=None):
    priorities = priorities or [Priority.MEDIUM] * len(categories)
    return DiagnosticReport(
        reasoning_trace="",
        suggestions=tuple(suggestion(c, p, f"s{i}") for i, (c, p) in enumerate(zip(categories, priorities))),
    )


def context(**overrides):
    values = dict(
        proposal_id="hierarchical_token_fusion",
        proposal_modules=MODULES,
        implementation=IMPL,
        best_metric=0.70,
        trial_metric=0.66,
        parent_metric=0.70,
    )
    values.update(overrides)
    return DiagnosticContext(**values)


class ScriptedGenerator:
    """Returns queued outputs in order; raises queued exceptions."""

    def __init__(self, reports=(), audits=()):
        self.reports = list(reports)
        self.audits = list(audits)
        self.calls = 0

    def report(self, ctx):
        self.calls += 1
        item = self.reports.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    def audit(self, modules, implementation):
        self.calls += 1
        return self.audits.pop(0)


@pytest.mark.parametrize(
    "trial, best, expected",
    [(0.6835, 0.7142, DiagnosticMode.FAILURE), (0.7682, 0.7142, DiagnosticMode.OPTIMIZATION),
     (0.7142, 0.7142, DiagnosticMode.FAILURE)],
)
def test_choose_mode(trial, best, expected):
    assert choose_mode(trial, best) is expected


def test_choose_mode_rejects_out_of_range():
    with pytest.raises(ValueError):
        choose_mode(1.5, 0.5)


def test_validate_report_examples():
    good = [SuggestionCategory.ARCHITECTURE, SuggestionCategory.HYPERPARAMETER, SuggestionCategory.CODE_FIX,
            SuggestionCategory.PROPOSAL_GAP, SuggestionCategory.ARCHITECTURE]
    assert validate_report(report_of(good)).valid
    no_gap = validate_report(report_of([SuggestionCategory.ARCHITECTURE] * 5))
    assert any(v.startswith("gap:") for v in no_gap.violations)
    assert any(v.startswith("diversity:") for v in no_gap.violations)
    short = validate_report(report_of(good[:4]))
    assert any(v.startswith("count:") for v in short.violations)


def test_validate_report_matches_rule_recheck_on_every_multiset():
    for combo in itertools.product(CATS, repeat=5):
        verdict = validate_report(report_of(list(combo)))
        expected = SuggestionCategory.PROPOSAL_GAP in combo and len(set(combo)) >= 2
        assert verdict.valid == expected, combo


def test_partition_examples():
    picks = {1: Priority.HIGH, 2: Priority.MEDIUM, 3: Priority.HIGH, 4: Priority.MEDIUM, 5: Priority.MEDIUM}
    suggestions = [Suggestion(SuggestionCategory.ARCHITECTURE, str(i), picks[i]) for i in range(1, 6)]
    assert [s.description for s in partition_suggestions(suggestions, Agent.A)] == ["1", "3"]
    assert [s.description for s in partition_suggestions(suggestions, Agent.B)] == ["2", "4"]


def test_partition_with_three_suggestions_reuses_one():
    suggestions = [suggestion(SuggestionCategory.CODE_FIX, Priority.HIGH, str(i)) for i in range(3)]
    a = partition_suggestions(suggestions, Agent.A)
    b = partition_suggestions(suggestions, Agent.B)
    assert [s.description for s in a] == ["0", "1"]
    assert [s.description for s in b] == ["2", "0"]


def test_divergence_over_every_priority_assignment():
    for priorities in itertools.product(list(Priority), repeat=5):
        suggestions = [Suggestion(SuggestionCategory.ARCHITECTURE, str(i), p) for i, p in enumerate(priorities)]
        a = partition_suggestions(suggestions, Agent.A)
        b = partition_suggestions(suggestions, Agent.B)
        assert len(a) == len(b) == 2
        assert len({s.description for s in a + b}) >= 3
        assert not {s.description for s in a} & {s.description for s in b}
        ranks_a = [s.priority.rank for s in a]
        assert max(ranks_a) <= min(s.priority.rank for s in b)


def test_single_point_takes_top_ranked():
    report = report_of(
        [SuggestionCategory.ARCHITECTURE, SuggestionCategory.PROPOSAL_GAP],
        [Priority.MEDIUM, Priority.HIGH],
    )
    assert single_point(report).category is SuggestionCategory.PROPOSAL_GAP
    with pytest.raises(ValueError):
        single_point(DiagnosticReport("", ()))


def test_outcome_labels():
    assert outcome_label(context(error=ErrorInfo(ErrorClass.SHAPE), trial_metric=None)) == "code_issue"
    assert outcome_label(context()) == "regression"
    assert outcome_label(context(trial_metric=0.71, parent_metric=0.70)) == "diminishing"


def test_rule_based_report_names_gaps_and_is_valid():
    report = RuleBasedGenerator().report(context())
    assert validate_report(report).valid
    gaps = [s for s in report.suggestions if s.category is SuggestionCategory.PROPOSAL_GAP]
    assert [s.target for s in gaps] == ["hierarchical_tokenizer", "hierarchy_embedding"]
    assert report.suggestions[0].category is SuggestionCategory.ARCHITECTURE
    assert report.suggestions[0].priority is Priority.HIGH


def test_rule_based_report_leads_with_code_fix_on_error():
    ctx = context(error=ErrorInfo(ErrorClass.MEMORY, "out of memory"), trial_metric=None)
    report = RuleBasedGenerator().report(ctx)
    assert report.suggestions[0].category is SuggestionCategory.CODE_FIX
    assert "memory" in report.suggestions[0].description


def test_rule_based_report_for_faithful_implementation():
    faithful = ImplementationDescriptor("p", tuple((name, "faithful") for name in MODULES))
    report = RuleBasedGenerator().report(context(implementation=faithful, trial_metric=0.695))
    assert validate_report(report).valid
    assert report.suggestions[0].category is SuggestionCategory.HYPERPARAMETER


def test_rule_based_audit():
    audit = RuleBasedGenerator().audit(MODULES, IMPL)
    assert audit.module_statuses == {
        "hierarchical_tokenizer": ModuleStatusLabel.SIMPLIFIED,
        "hierarchy_embedding": ModuleStatusLabel.MISSING,
        "fusion_head": ModuleStatusLabel.FULLY_IMPLEMENTED,
    }
    assert [s.priority for s in audit.prioritized_suggestions] == [Priority.HIGH, Priority.MEDIUM]
    assert audit.prioritized_suggestions[0].target == "hierarchy_embedding"
    assert validate_audit(audit, MODULES).valid


def test_all_faithful_audit_has_no_suggestions():
    faithful = ImplementationDescriptor("p", tuple((name, "faithful") for name in MODULES))
    audit = RuleBasedGenerator().audit(MODULES, faithful)
    assert set(audit.module_statuses.values()) == {ModuleStatusLabel.FULLY_IMPLEMENTED}
    assert audit.prioritized_suggestions == ()


def test_validate_audit_violations():
    audit = CompletenessAudit(
        module_statuses={"hierarchical_tokenizer": ModuleStatusLabel.MISSING, "extra": ModuleStatusLabel.MISSING},
        prioritized_suggestions=(
            suggestion(SuggestionCategory.PROPOSAL_GAP, Priority.LOW),
            suggestion(SuggestionCategory.PROPOSAL_GAP, Priority.HIGH),
        ),
    )
    violations = validate_audit(audit, MODULES).violations
    assert "missing module: hierarchy_embedding" in violations
    assert "unknown module: extra" in violations
    assert "suggestions not ordered by priority" in violations


def test_generate_diagnosis_retries_then_succeeds(caplog):
    bad = report_of([SuggestionCategory.ARCHITECTURE] * 5)
    good = RuleBasedGenerator().report(context())
    g = ScriptedGenerator(reports=[bad, ValueError("bad json"), good])
    with caplog.at_level(logging.WARNING, logger="src.ddf"):
        assert generate_diagnosis(context(), g, max_retries=3) == good
    assert g.calls == 3
    assert len([r for r in caplog.records if "rejected" in r.getMessage()]) == 2


def test_generate_diagnosis_gives_up_after_budget():
    bad = report_of([SuggestionCategory.ARCHITECTURE] * 4)
    g = ScriptedGenerator(reports=[bad] * 4)
    with pytest.raises(GenerationFailure) as info:
        generate_diagnosis(context(), g, max_retries=3)
    assert g.calls == 4
    assert any(v.startswith("count:") for v in info.value.violations)


def test_generate_audit_retries():
    incomplete = CompletenessAudit(module_statuses={})
    g = ScriptedGenerator(audits=[incomplete, RuleBasedGenerator().audit(MODULES, IMPL)])
    audit = generate_audit(MODULES, IMPL, g, max_retries=1)
    assert len(audit.module_statuses) == 3
    with pytest.raises(GenerationFailure):
        generate_audit(MODULES, IMPL, ScriptedGenerator(audits=[incomplete]), max_retries=0)


def test_select_suggestions_uses_partition():
    report = RuleBasedGenerator().report(context())
    assert select_suggestions(report, Agent.A) == partition_suggestions(report.suggestions, Agent.A)


def test_report_and_audit_serialization():
    report = RuleBasedGenerator().report(context())
    assert DiagnosticReport.from_dict(report.to_dict()) == report
    audit = RuleBasedGenerator().audit(MODULES, IMPL)
    assert CompletenessAudit.from_dict(audit.to_dict()) == audit


def test_tables():
    report = RuleBasedGenerator().report(context())
    lines = format_report_table(report).splitlines()
    assert lines[0].split() == ["#", "Category", "Priority", "Suggestion"]
    assert len(lines) == 6
    assert "Proposal Gap" in lines[2]
    audit_lines = format_audit_table(RuleBasedGenerator().audit(MODULES, IMPL)).splitlines()
    assert audit_lines[0].startswith("Module")
    assert "Missing" in audit_lines[2] and "Add the missing hierarchy_embedding module" in audit_lines[2]
    assert audit_lines[3].rstrip().endswith("Fully implemented")
