import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import fisher_exact

from src.ddf import DiagnosticMode
from src.errors import ConfigurationError, EvidenceRefused, PipelineAborted, WorkbenchError
from src.models import Agent, ErrorClass, ErrorInfo, EvalMetrics
from src.pipeline import (
    Candidate,
    EvidenceBundle,
    ExperimentConfig,
    Variant,
    WinOutcome,
    compete,
    establish_baseline,
    evaluate_win,
    export_evidence,
    load_experiment,
    run_ablation_suite,
    run_experiment,
    simulate,
)
from src.qwbe import ActionKind, QwbeParams
from src.simulator import Simulator, load_landscape
from src.stats import paired_fsp_test
from src.trace_io import record_to_lines


def metrics(dice, hd95=None):
    return EvalMetrics(dice=dice, hd95=hd95)


def test_establish_baseline_picks_best_and_breaks_ties_by_name():
    bank = [("unetr", metrics(0.70)), ("nnunet", metrics(0.7142)), ("attention_unet", metrics(0.7142))]
    assert establish_baseline("d7", bank) == ("attention_unet", 0.7142)
    with pytest.raises(ConfigurationError):
        establish_baseline("d7", [])


@pytest.mark.parametrize(
    "best, baseline, expected",
    [
        (metrics(0.7682, 11.2), metrics(0.7142, 12.0), WinOutcome.WIN_BY_DICE),
        (metrics(0.6956, 14.65), metrics(0.6957, 16.33), WinOutcome.WIN_BY_HD95),
        (metrics(0.6956, 16.33), metrics(0.6957, 16.33), WinOutcome.NO_WIN),
        (metrics(0.7190, 10.0), metrics(0.7142, 12.0), WinOutcome.WIN_BY_HD95),
        (metrics(0.7000, 1.0), metrics(0.7142, 12.0), WinOutcome.NO_WIN),
    ],
)
def test_evaluate_win(best, baseline, expected):
    assert evaluate_win(best, baseline) is expected


def test_hd95_tiebreak_without_hd95_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="src.pipeline"):
        assert evaluate_win(metrics(0.71), metrics(0.7142)) is WinOutcome.NO_WIN
    assert "hd95 tiebreak skipped" in caplog.text


def test_compete_rules():
    a = Candidate(Agent.A, (), metrics=metrics(0.70))
    b = Candidate(Agent.B, (), metrics=metrics(0.70))
    assert compete(a, b) == (a, 0.70)
    better_b = Candidate(Agent.B, (), metrics=metrics(0.72))
    assert compete(a, better_b) == (better_b, 0.70)
    failed = Candidate(Agent.A, (), error=ErrorInfo(ErrorClass.SHAPE))
    assert compete(failed, b) == (b, None)
    both_failed = Candidate(Agent.B, (), error=ErrorInfo(ErrorClass.MEMORY))
    assert compete(failed, both_failed) == (failed, None)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig("d1", ())
    with pytest.raises(ConfigurationError):
        ExperimentConfig("d1", ("p", "p"))
    with pytest.raises(ConfigurationError):
        ExperimentConfig("d1", ("a", "b", "c", "d"))
    with pytest.raises(ConfigurationError):
        ExperimentConfig("d1", ("a",), seed=-1)
    config = ExperimentConfig("d1", ("a",), qwbe_params=QwbeParams(proposal_budget=2), seed=4)
    assert ExperimentConfig.from_dict(config.to_dict()) == config


def test_load_experiment_defaults_proposals_from_landscape(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("experiment:\n  seed: 3\nlandscape:\n  fixture: one_good_arm\n", encoding="utf-8")
    config = load_experiment(path)
    assert config.seed == 3
    assert config.proposal_ids == ("flat_attention_gate", "flat_boundary_loss", "drifting_frequency_mixer")
    assert config.landscape is not None
    (tmp_path / "bad.yaml").write_text("experiment: {}\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_experiment(tmp_path / "bad.yaml")


def test_winning_run_stops_opening_proposals_and_exploits(make_config, winning_landscape):
    record = simulate(make_config(winning_landscape))
    assert record.fsp == 1
    assert record.win is WinOutcome.WIN_BY_DICE
    assert record.tree.k == 1
    assert record.nodes == record.config.qwbe_params.iteration_budget
    assert [s.action for s in record.steps[1:]] == [ActionKind.EXPAND_GLOBAL_BEST.value] * (record.nodes - 1)
    assert record.delta_dice == pytest.approx(0.02)
    assert len(record.digests) == 1


def test_every_step_runs_both_agents(make_config, winning_landscape):
    record = simulate(make_config(winning_landscape))
    for step in record.steps:
        assert [c.agent for c in step.candidates] == [Agent.A, Agent.B]
        assert step.winner in (Agent.A, Agent.B)
        assert record.tree.nodes[step.node_id].agent_label == step.winner.value
    assert record.steps[0].feedback_mode is DiagnosticMode.OPTIMIZATION
    assert record.tree.n_total == record.tree.k + record.nodes


def test_winning_run_is_ablated_and_exports_evidence(make_config, winning_landscape):
    record = simulate(make_config(winning_landscape))
    assert [a.removed_module for a in record.ablations] == ["gate", "norm"]
    for ablation in record.ablations:
        assert dict(ablation.implementation.modules)[ablation.removed_module] == "substitute"
        assert ablation.delta_dice == pytest.approx(0.0, abs=1e-12)
    evidence = record.evidence
    assert evidence.proposal_record["modules"] == ["gate", "norm"]
    assert evidence.experimental_record["win"] == "win_by_dice"
    assert evidence.experimental_record["fsp"] == 1
    assert EvidenceBundle.from_json(evidence.to_json()) == evidence


def test_losing_run_refuses_evidence(make_config):
    record = simulate(make_config("all_bad_arms"))
    assert record.win is WinOutcome.NO_WIN
    assert record.fsp is None
    assert record.ablations is None and record.evidence is None
    assert record.nodes <= record.config.qwbe_params.proposal_budget * record.config.qwbe_params.iteration_budget
    with pytest.raises(EvidenceRefused):
        export_evidence(record)


REPLAY_FIXTURES = ("one_good_arm", "all_bad_arms", "multi_cause_failure", "dataset16_like")


def replay_config(index):
    rng = np.random.default_rng(1000 + index)
    landscape = load_landscape(REPLAY_FIXTURES[index % len(REPLAY_FIXTURES)])
    ids = tuple(landscape.proposal_ids[: int(rng.integers(1, len(landscape.proposal_ids) + 1))])
    params = QwbeParams(
        proposal_budget=len(ids) + int(rng.integers(0, 2)),
        iteration_budget=int(rng.integers(2, 8)),
        debug_depth=int(rng.integers(1, 4)),
    )
    return ExperimentConfig(
        dataset_id=f"dataset{index}",
        proposal_ids=ids,
        qwbe_params=params,
        seed=int(rng.integers(0, 2 ** 32)),
        landscape=landscape,
    )


@pytest.mark.parametrize("index", range(20))
def test_runs_replay_identically(index):
    config = replay_config(index)
    for variant in Variant:
        varied = replace(config, variant=variant)
        first = "\n".join(record_to_lines(simulate(varied))).encode("utf-8")
        second = "\n".join(record_to_lines(simulate(varied))).encode("utf-8")
        assert first == second


def test_seed_changes_the_run(make_config):
    lines = {tuple(record_to_lines(simulate(make_config("one_good_arm", seed=s)))) for s in (1, 2)}
    assert len(lines) == 2


def test_single_proposal_run_never_opens_a_second_branch(make_config):
    record = simulate(make_config("multi_cause_failure"))
    assert record.tree.k == 1
    assert all(s.branch_id == 0 for s in record.steps)


def test_structured_feedback_beats_single_point_on_multi_cause_failure(make_config):
    full = simulate(make_config("multi_cause_failure", variant=Variant.FULL))
    single = simulate(make_config("multi_cause_failure", variant=Variant.MINUS_DDF))
    assert full.win.is_win and full.fsp is not None and full.fsp <= 4
    assert single.win is WinOutcome.NO_WIN


def test_single_point_variant_forwards_one_suggestion(make_config):
    record = simulate(make_config("multi_cause_failure", variant=Variant.MINUS_DDF))
    failure_steps = [s for s in record.steps if s.feedback_mode is DiagnosticMode.FAILURE]
    assert failure_steps
    assert all(len(s.feedback_suggestions()) == 1 for s in failure_steps)


def test_raw_log_variant_grows_context(make_config):
    full = simulate(make_config("all_bad_arms", variant=Variant.FULL))
    raw = simulate(make_config("all_bad_arms", variant=Variant.MINUS_LRM))
    assert max(s.context_chars for s in raw.steps) > max(s.context_chars for s in full.steps)
    cap = full.config.memory_caps.context_cap
    assert all(s.context_chars <= cap for s in full.steps)


def test_raw_log_context_grows_linearly_within_a_branch(make_config):
    # One proposal, so every step extends the same raw log and the global narrative stays fixed.
    raw = simulate(make_config("multi_cause_failure", variant=Variant.MINUS_LRM))
    chars = [s.context_chars for s in raw.steps]
    assert len(chars) > 2
    shortest_log = len("verification epoch failed")
    increments = [after - before for before, after in zip(chars, chars[1:])]
    assert all(step > shortest_log for step in increments)
    assert all(c >= chars[0] + t * (shortest_log + 1) for t, c in enumerate(chars))


class FlakyWorkbench(Simulator):
    def __init__(self, seed, landscapes, fail_after):
        super().__init__(seed, landscapes)
        self.calls = 0
        self.fail_after = fail_after

    def training_network(self, dataset_id, configuration, impl, plans):
        self.calls += 1
        if self.calls > self.fail_after:
            raise WorkbenchError("trainer node lost")
        return super().training_network(dataset_id, configuration, impl, plans)


def test_infrastructure_failure_aborts_with_partial_record(make_config, winning_landscape):
    config = make_config(winning_landscape)
    workbench = FlakyWorkbench(config.seed, {config.dataset_id: config.landscape}, fail_after=4)
    with pytest.raises(PipelineAborted) as info:
        run_experiment(config, workbench)
    partial = info.value.partial_record
    assert partial.aborted == "trainer node lost"
    assert len(partial.steps) == 2


def test_simulate_needs_a_landscape():
    with pytest.raises(ConfigurationError):
        simulate(ExperimentConfig("d1", ("p0",)))


def test_ablation_suite_is_sorted_by_variant_then_seed(make_config, winning_landscape):
    config = make_config(winning_landscape)
    records = run_ablation_suite(config, [Variant.MINUS_DDF, Variant.FULL], [2, 1])
    assert [(r.config.variant, r.config.seed) for r in records] == [
        (Variant.FULL, 1), (Variant.FULL, 2), (Variant.MINUS_DDF, 1), (Variant.MINUS_DDF, 2),
    ]
    assert replace(records[0].config, seed=2) == records[1].config


def _mean_fsp(records):
    budget = records[0].config.qwbe_params.proposal_budget * records[0].config.qwbe_params.iteration_budget
    return sum(r.fsp if r.fsp is not None else budget + 1 for r in records) / len(records)


@pytest.mark.slow
def test_search_finds_the_good_arm_sooner_than_round_robin(make_config):
    records = run_ablation_suite(make_config("one_good_arm"), [Variant.FULL, Variant.MINUS_QWBE], range(200), workers=4)
    full = [r for r in records if r.config.variant is Variant.FULL]
    uniform = [r for r in records if r.config.variant is Variant.MINUS_QWBE]
    assert _mean_fsp(full) < _mean_fsp(uniform)
    budget = full[0].config.qwbe_params.proposal_budget * full[0].config.qwbe_params.iteration_budget
    assert paired_fsp_test(full, uniform, budget).p_value < 0.01


@pytest.mark.slow
def test_structured_feedback_wins_more_often_over_many_seeds(make_config):
    records = run_ablation_suite(
        make_config("multi_cause_failure"), [Variant.FULL, Variant.MINUS_DDF], range(200), workers=4
    )
    wins = {v: sum(r.win.is_win for r in records if r.config.variant is v) for v in (Variant.FULL, Variant.MINUS_DDF)}
    assert wins[Variant.FULL] > wins[Variant.MINUS_DDF]
    runs = len(records) // 2
    table = [[wins[v], runs - wins[v]] for v in (Variant.FULL, Variant.MINUS_DDF)]
    _, p_value = fisher_exact(table, alternative="greater")
    assert p_value < 0.05
