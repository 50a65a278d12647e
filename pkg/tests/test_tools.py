import json

import pytest

from src.policies.diagnostic_policy import get_diagnostic_policy
from src.tools.experiments import list_landscapes, run_ablation, run_simulation
from src.tools.statistics import binomial_test, bonferroni_threshold, wilcoxon_test, wilson_interval
from src.tools.traces import scan_trace_corpus, session_event_histogram


def call(tool, *args, **kwargs):
    """Registered tools may be wrapped; call the underlying function."""
    return getattr(tool, "fn", tool)(*args, **kwargs)


def test_list_landscapes():
    assert "one_good_arm" in call(list_landscapes)


def test_run_simulation_reports_summary():
    result = call(run_simulation, fixture="multi_cause_failure", seed=0)
    assert result["variant"] == "full"
    assert result["baseline"] == "nnunet_3d_fullres"
    assert result["win"] in ("win_by_dice", "win_by_hd95", "no_win")
    assert len(result["digests"]) == 1
    json.dumps(result)


def test_run_simulation_rejects_unknown_inputs():
    with pytest.raises(ValueError):
        call(run_simulation, fixture="no_such_landscape")
    with pytest.raises(ValueError):
        call(run_simulation, variant="minus_everything")


def test_run_ablation_summarizes_each_variant():
    result = call(run_ablation, fixture="multi_cause_failure", variants=["full", "minus_ddf"], seeds=3)
    assert [s["variant"] for s in result["summary"]] == ["full", "minus_ddf"]
    assert all(s["runs"] == 3 for s in result["summary"])
    assert set(result["fsp_tests"]) == {"minus_ddf"}
    with pytest.raises(ValueError):
        call(run_ablation, seeds=0)


def test_statistics_tools():
    assert call(binomial_test, 22, 31)["p_value"] == pytest.approx(0.0147, abs=5e-5)
    interval = call(wilson_interval, 22, 31)
    assert interval["lower"] == pytest.approx(0.534, abs=1e-3)
    assert interval["upper"] == pytest.approx(0.839, abs=1e-3)
    assert call(bonferroni_threshold, 0.05, 40) == pytest.approx(0.00125)
    result = call(wilcoxon_test, [3, 5, 7, 9], [1, 1, 1, 1], alternative="greater")
    assert result["statistic"] == 10.0 and result["method"] == "exact"


def test_trace_tools(tmp_path):
    events = tmp_path / "dataset7" / "20260309_011515" / "stage_1" / "events"
    events.mkdir(parents=True)
    path = events / "openhands_events_1.jsonl"
    path.write_text(
        '{"timestamp": "2026-03-09T01:15:15.772208", "event_type": "ActionEvent", "event_str": "edit"}\n'
        "{truncated\n",
        encoding="utf-8",
    )
    index = call(scan_trace_corpus, str(tmp_path))
    assert index["datasets"] == ["dataset7"]
    assert index["totals"] == {"events": 1, "summaries": 0, "codes": 0}

    histogram = call(session_event_histogram, str(path), lenient=True)
    assert histogram["histogram"] == {"ActionEvent": 1}
    assert histogram["skipped_lines"] == 1
    assert histogram["summary"] is None


def test_policy_resource_states_portfolio_rules():
    text = call(get_diagnostic_policy)
    assert "FIVE suggestions" in text
    assert "proposal_gap" in text
