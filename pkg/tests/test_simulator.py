import pytest

from src.errors import ConfigurationError, ResultConsumedError, UnknownDatasetError
from src.models import Agent, ErrorClass, ErrorInfo, Priority, Suggestion, SuggestionCategory
from src.pipeline import establish_baseline
from src.qwbe import LeafMode
from src.simulator import (
    EffectDistribution,
    LandscapeConfig,
    ModuleSpec,
    ProposalLandscape,
    Simulator,
    TrainOutput,
    fixture_names,
    load_landscape,
)

DATASET = "d1"


def landscape(**overrides):
    values = dict(
        proposals=(
            ProposalLandscape(
                "p0",
                theta=0.66,
                modules=(ModuleSpec("tokenizer", "shortcut", 0.025), ModuleSpec("head", "faithful", 0.01)),
            ),
        ),
        noise=0.0,
        p_err=0.0,
    )
    values.update(overrides)
    return LandscapeConfig(**values)


def simulator(seed=7, **overrides):
    return Simulator(seed, {DATASET: landscape(**overrides)})


def train_and_evaluate(sim, impl):
    plans = sim.plan_and_preprocess(DATASET, ["3d_fullres"])
    out = sim.training_network(DATASET, "3d_fullres", impl, plans)
    assert isinstance(out, TrainOutput)
    return sim.evaluate(DATASET, out.result_ref)


def test_fixtures_are_bundled():
    assert {"one_good_arm", "all_bad_arms", "multi_cause_failure", "dataset16_like"} <= set(fixture_names())
    one = load_landscape("one_good_arm")
    assert one.proposal_ids == ["flat_attention_gate", "flat_boundary_loss", "drifting_frequency_mixer"]
    assert one.proposal("drifting_frequency_mixer").drift == pytest.approx(0.01)
    assert load_landscape({"fixture": "multi_cause_failure"}).effect(SuggestionCategory.CODE_FIX).mean == pytest.approx(0.01)


def test_landscape_round_trip_and_validation():
    land = load_landscape("multi_cause_failure")
    assert LandscapeConfig.from_dict(land.to_dict()) == land
    with pytest.raises(ConfigurationError):
        LandscapeConfig.from_dict({"proposals": [{"id": "p", "theta": 1.4}]})
    with pytest.raises(ConfigurationError):
        LandscapeConfig.from_dict({"proposals": []})
    with pytest.raises(ConfigurationError):
        load_landscape("no_such_landscape")
    with pytest.raises(ConfigurationError):
        ModuleSpec("m", "half-done")


def test_plans_are_deterministic_and_checked():
    sim = simulator()
    plans = sim.plan_and_preprocess(DATASET, ["3d_fullres"])
    assert plans.configurations == ("3d_fullres",)
    assert simulator().plan_and_preprocess(DATASET, ["3d_fullres"]) == plans
    with pytest.raises(UnknownDatasetError):
        sim.plan_and_preprocess("missing", ["3d_fullres"])


def test_baseline_bank_has_configured_winner():
    sim = simulator(baseline_name="nnunet_3d_fullres", baseline_dice=0.7142)
    bank = sim.build_baseline_bank(DATASET)
    assert len(bank) == 14
    assert len({name for name, _ in bank}) == 14
    assert establish_baseline(DATASET, bank) == ("nnunet_3d_fullres", 0.7142)
    assert sim.build_baseline_bank(DATASET) == bank


def test_baseline_bank_winner_stays_strict_at_low_dice():
    with pytest.raises(ConfigurationError):
        landscape(baseline_dice=0.0)
    bank = simulator(baseline_name="nnunet_3d_fullres", baseline_dice=0.01).build_baseline_bank(DATASET)
    others = [m.dice for name, m in bank if name != "nnunet_3d_fullres"]
    assert max(others) < 0.01
    assert establish_baseline(DATASET, bank) == ("nnunet_3d_fullres", 0.01)


def test_noise_free_evaluation_returns_latent_quality():
    sim = simulator()
    impl = sim.initial_implementation(DATASET, "p0")
    metrics = train_and_evaluate(sim, impl)
    assert metrics.dice == pytest.approx(0.66 + 0.01)
    assert 30 * (1 - metrics.dice) * 0.8 <= metrics.hd95 <= 30 * (1 - metrics.dice) * 1.2
    assert len(metrics.per_case) == 40


def test_result_is_consumed_once():
    sim = simulator()
    impl = sim.initial_implementation(DATASET, "p0")
    out = sim.training_network(DATASET, "3d_fullres", impl, sim.plan_and_preprocess(DATASET, ["3d_fullres"]))
    sim.evaluate(DATASET, out.result_ref)
    with pytest.raises(ResultConsumedError):
        sim.evaluate(DATASET, out.result_ref)


def test_training_always_fails_at_full_error_rate():
    sim = simulator(p_err=1.0)
    impl = sim.initial_implementation(DATASET, "p0")
    out = sim.training_network(DATASET, "3d_fullres", impl, sim.plan_and_preprocess(DATASET, ["3d_fullres"]))
    assert isinstance(out, ErrorInfo)
    assert out.error_class in (ErrorClass.SHAPE, ErrorClass.NUMERIC, ErrorClass.MEMORY)


def test_verification_catches_defects():
    sure = simulator(defect_rate=1.0, q_catch=1.0)
    impl = sure.initial_implementation(DATASET, "p0")
    assert impl.defect is not None
    assert not sure.verify_one_epoch(impl)

    blind = simulator(defect_rate=1.0, q_catch=0.0)
    impl = blind.initial_implementation(DATASET, "p0")
    assert blind.verify_one_epoch(impl)
    out = blind.training_network(DATASET, "3d_fullres", impl, blind.plan_and_preprocess(DATASET, ["3d_fullres"]))
    assert isinstance(out, ErrorInfo)

    clean = simulator()
    assert clean.verify_one_epoch(clean.initial_implementation(DATASET, "p0"))


def test_repair_clears_defect():
    sim = simulator(defect_rate=1.0, q_catch=1.0)
    impl = sim.initial_implementation(DATASET, "p0")
    fixed = sim.apply_modification(impl, [], LeafMode.REPAIR, Agent.A)
    assert fixed.defect is None
    assert fixed.improve_depth == impl.improve_depth


def test_gap_suggestion_restores_module():
    sim = simulator()
    impl = sim.initial_implementation(DATASET, "p0")
    gap = Suggestion(SuggestionCategory.PROPOSAL_GAP, "restore tokenizer", Priority.HIGH, target="tokenizer")
    improved = sim.apply_modification(impl, [gap], LeafMode.IMPROVE, Agent.B)
    assert dict(improved.modules)["tokenizer"] == "faithful"
    assert sim.latent_dice(improved) == pytest.approx(sim.latent_dice(impl) + 0.025)
    assert improved.lineage == ("p0", "iB")


def test_category_effects_are_drawn_per_suggestion():
    sim = simulator(effects={SuggestionCategory.CODE_FIX: EffectDistribution(0.01, 0.0)})
    impl = sim.initial_implementation(DATASET, "p0")
    fix = Suggestion(SuggestionCategory.CODE_FIX, "fix masking")
    improved = sim.apply_modification(impl, [fix, fix], LeafMode.IMPROVE, Agent.A)
    assert improved.effects == (0.01, 0.01)
    assert sim.gain(improved) == pytest.approx(0.02)


def test_drift_accumulates_with_improvement_depth():
    sim = Simulator(1, {DATASET: LandscapeConfig(proposals=(ProposalLandscape("p", 0.68, drift=0.01),))})
    impl = sim.initial_implementation(DATASET, "p")
    tweak = Suggestion(SuggestionCategory.HYPERPARAMETER, "tune")
    for step in range(3):
        impl = sim.apply_modification(impl, [tweak], LeafMode.IMPROVE, Agent.A, salt=str(step))
    assert sim.latent_dice(impl) == pytest.approx(0.71)


def test_ablation_substitutes_module_permanently():
    sim = simulator()
    impl = sim.initial_implementation(DATASET, "p0")
    ablated = sim.ablate(impl, "head")
    assert dict(ablated.modules)["head"] == "substitute"
    assert sim.latent_dice(ablated) == pytest.approx(0.66)
    gap = Suggestion(SuggestionCategory.PROPOSAL_GAP, "restore head", target="head")
    assert dict(sim.apply_modification(ablated, [gap], LeafMode.IMPROVE, Agent.A).modules)["head"] == "substitute"
    with pytest.raises(ValueError):
        sim.ablate(impl, "missing")


def test_seed_artifact_gain_is_inherited():
    sim = simulator(effects={SuggestionCategory.CODE_FIX: EffectDistribution(0.02, 0.0)})
    impl = sim.initial_implementation(DATASET, "p0")
    improved = sim.apply_modification(impl, [Suggestion(SuggestionCategory.CODE_FIX, "fix")], LeafMode.IMPROVE, Agent.A)
    successor = sim.initial_implementation(DATASET, "p0", seed_impl=improved)
    assert successor.inherited == pytest.approx(0.02)


def test_same_seed_same_measurements():
    def measure(seed):
        sim = Simulator(seed, {DATASET: load_landscape("one_good_arm")})
        impl = sim.initial_implementation(DATASET, "drifting_frequency_mixer")
        return train_and_evaluate(sim, impl)

    assert measure(3) == measure(3)


def test_training_log_reports_epochs():
    sim = simulator()
    impl = sim.initial_implementation(DATASET, "p0")
    out = sim.training_network(DATASET, "3d_fullres", impl, sim.plan_and_preprocess(DATASET, ["3d_fullres"]))
    assert out.log.splitlines()[-1].startswith("epoch 50 ")
