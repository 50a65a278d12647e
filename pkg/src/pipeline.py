"""
End-to-end research loop over a workbench.

A run establishes the baseline, then repeatedly selects a branch with QWBE,
has two agents implement competing modifications, trains and evaluates both,
commits the winner to the tree and the reflective memory, and asks the
diagnostic generator for feedback on the committed trial. Once a trial beats
the baseline no new proposal is opened; a winning run is followed by module
ablations and an evidence bundle.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import yaml

from .ddf import (
    CompletenessAudit,
    DiagnosticContext,
    DiagnosticGenerator,
    DiagnosticMode,
    DiagnosticReport,
    RuleBasedGenerator,
    choose_mode,
    generate_audit,
    generate_diagnosis,
    outcome_label,
    partition_suggestions,
    single_point,
)
from .errors import (
    BranchExhausted,
    ConfigurationError,
    DegenerateSampleError,
    EvidenceRefused,
    GenerationFailure,
    PipelineAborted,
    WorkbenchError,
)
from .lrm import (
    CycleDigest,
    CycleEntry,
    CycleHistory,
    ExtractiveSummarizer,
    GlobalMemory,
    MemoryCaps,
    ModificationRecord,
    Seed,
    Summarizer,
    append_entry,
    classify_status,
    digest_cycle,
    make_seed,
    merge_global,
    render_context,
    render_raw_context,
    summarize_trial,
)
from .models import (
    Agent,
    ErrorClass,
    ErrorInfo,
    EvalMetrics,
    ImplementationDescriptor,
    Priority,
    Suggestion,
    SuggestionCategory,
)
from .qwbe import (
    ActionKind,
    LeafMode,
    Phase,
    QwbeParams,
    SearchTree,
    TrialNode,
    round_robin_action,
    select_action,
    select_leaf,
)
from .simulator import LandscapeConfig, Plans, Simulator, TrainOutput, load_landscape
from .stats import PairedSamples, wilcoxon_signed_rank

logger = logging.getLogger(__name__)

WIN_MARGIN = 0.005
SEED_LIMIT = 2 ** 64

IMPLEMENT_PROPOSAL = Suggestion(
    SuggestionCategory.PROPOSAL_GAP, "Implement the proposal as written on top of the seed artifact", Priority.HIGH
)
REFINE_BEST = Suggestion(
    SuggestionCategory.HYPERPARAMETER, "Refine the training schedule of the current best implementation", Priority.MEDIUM
)


class Variant(str, Enum):
    FULL = "full"
    MINUS_QWBE = "minus_qwbe"
    MINUS_LRM = "minus_lrm"
    MINUS_DDF = "minus_ddf"


VARIANT_ORDER = {variant: position for position, variant in enumerate(Variant)}


class WinOutcome(str, Enum):
    WIN_BY_DICE = "win_by_dice"
    WIN_BY_HD95 = "win_by_hd95"
    NO_WIN = "no_win"

    @property
    def is_win(self) -> bool:
        return self is not WinOutcome.NO_WIN


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    dataset_id: str
    proposal_ids: Tuple[str, ...]
    qwbe_params: QwbeParams = QwbeParams()
    memory_caps: MemoryCaps = MemoryCaps()
    seed: int = 0
    variant: Variant = Variant.FULL
    max_retries: int = 3
    configuration: str = "3d_fullres"
    landscape: Optional[LandscapeConfig] = None

    def __post_init__(self):
        if not self.proposal_ids:
            raise ConfigurationError("at least one proposal is required")
        if len(set(self.proposal_ids)) != len(self.proposal_ids):
            raise ConfigurationError("proposal ids must be unique")
        if len(self.proposal_ids) > self.qwbe_params.proposal_budget:
            raise ConfigurationError(
                f"{len(self.proposal_ids)} proposals exceed the proposal budget {self.qwbe_params.proposal_budget}"
            )
        if not 0 <= self.seed < SEED_LIMIT:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "proposal_ids": list(self.proposal_ids),
            "qwbe_params": self.qwbe_params.to_dict(),
            "memory_caps": self.memory_caps.to_dict(),
            "seed": self.seed,
            "variant": self.variant.value,
            "max_retries": self.max_retries,
            "configuration": self.configuration,
            "landscape": self.landscape.to_dict() if self.landscape is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        try:
            landscape = data.get("landscape")
            return cls(
                dataset_id=str(data["dataset_id"]),
                proposal_ids=tuple(str(p) for p in data["proposal_ids"]),
                qwbe_params=QwbeParams.from_dict(data.get("qwbe_params") or {}),
                memory_caps=MemoryCaps.from_dict(data.get("memory_caps") or {}),
                seed=int(data.get("seed", 0)),
                variant=Variant(data.get("variant", Variant.FULL.value)),
                max_retries=int(data.get("max_retries", 3)),
                configuration=str(data.get("configuration", "3d_fullres")),
                landscape=load_landscape(landscape) if landscape else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid experiment configuration: {e}") from e


def load_experiment(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read a YAML file with an `experiment:` section and a `landscape:` section.
    The landscape may inline a landscape or name a bundled fixture; when
    `proposal_ids` is omitted every proposal of the landscape is used.
    """
    try:
        with Path(path).open(encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Cannot read experiment config {path}: {e}") from e

    experiment = dict(data.get("experiment") or {})
    if "landscape" not in data:
        raise ConfigurationError(f"{path}: missing landscape section")
    landscape = load_landscape(data["landscape"])
    experiment.setdefault("dataset_id", "synthetic")
    experiment.setdefault("proposal_ids", landscape.proposal_ids)
    config = ExperimentConfig.from_dict(experiment)
    return replace(config, landscape=landscape)


# ---------------------------------------------------------------------------
# Workbench contract
# ---------------------------------------------------------------------------

class Workbench(Protocol):
    def build_baseline_bank(self, dataset_id: str) -> List[Tuple[str, EvalMetrics]]:
        ...

    def plan_and_preprocess(self, dataset_id: str, configs: Sequence[str]) -> Plans:
        ...

    def proposal_modules(self, dataset_id: str, proposal_id: str) -> Tuple[str, ...]:
        ...

    def initial_implementation(self, dataset_id: str, proposal_id: str, seed_impl: Any = None) -> Any:
        ...

    def apply_modification(
        self, impl: Any, suggestions: Sequence[Suggestion], mode: LeafMode, agent: Agent, salt: str = ""
    ) -> Any:
        ...

    def verify_one_epoch(self, impl: Any) -> bool:
        ...

    def training_network(self, dataset_id: str, configuration: str, impl: Any, plans: Plans) -> Union[TrainOutput, ErrorInfo]:
        ...

    def evaluate(self, dataset_id: str, result_ref: str) -> EvalMetrics:
        ...

    def ablate(self, impl: Any, module: str) -> Any:
        ...


@dataclass
class Generators:
    diagnostic: DiagnosticGenerator = field(default_factory=RuleBasedGenerator)
    summarizer: Summarizer = field(default_factory=ExtractiveSummarizer)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    """One agent's implementation of a step, trained and evaluated."""

    agent: Agent
    suggestions: Tuple[Suggestion, ...]
    metrics: Optional[EvalMetrics] = None
    error: Optional[ErrorInfo] = None
    artifact_ref: str = ""
    impl: Any = field(default=None, compare=False)
    log: str = field(default="", compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent": self.agent.value,
            "suggestions": [s.to_dict() for s in self.suggestions],
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "error": self.error.to_dict() if self.error is not None else None,
            "artifact_ref": self.artifact_ref,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Candidate":
        return cls(
            agent=Agent(data["agent"]),
            suggestions=tuple(Suggestion.from_dict(s) for s in data.get("suggestions", [])),
            metrics=EvalMetrics.from_dict(data["metrics"]) if data.get("metrics") else None,
            error=ErrorInfo.from_dict(data["error"]) if data.get("error") else None,
            artifact_ref=data.get("artifact_ref", ""),
        )


@dataclass(frozen=True)
class StepRecord:
    step: int
    action: str
    branch_id: int
    parent_id: int
    mode: LeafMode
    node_id: int
    winner: Agent
    candidates: Tuple[Candidate, ...]
    context_chars: int
    feedback_mode: DiagnosticMode
    feedback: Dict[str, Any]
    modification: ModificationRecord

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "action": self.action,
            "branch_id": self.branch_id,
            "parent_id": self.parent_id,
            "mode": self.mode.value,
            "node_id": self.node_id,
            "winner": self.winner.value,
            "candidates": [c.to_dict() for c in self.candidates],
            "context_chars": self.context_chars,
            "feedback_mode": self.feedback_mode.value,
            "feedback": self.feedback,
            "modification": self.modification.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StepRecord":
        return cls(
            step=data["step"],
            action=data["action"],
            branch_id=data["branch_id"],
            parent_id=data["parent_id"],
            mode=LeafMode(data["mode"]),
            node_id=data["node_id"],
            winner=Agent(data["winner"]),
            candidates=tuple(Candidate.from_dict(c) for c in data.get("candidates", [])),
            context_chars=data.get("context_chars", 0),
            feedback_mode=DiagnosticMode(data["feedback_mode"]),
            feedback=data.get("feedback") or {},
            modification=ModificationRecord.from_dict(data["modification"]),
        )

    def feedback_suggestions(self) -> List[Suggestion]:
        """Suggestions delivered by this step's diagnostic event."""
        raw = self.feedback.get("suggestions") or self.feedback.get("prioritized_suggestions") or []
        return [Suggestion.from_dict(s) for s in raw]


@dataclass(frozen=True)
class AblationVariant:
    removed_module: str
    implementation: ImplementationDescriptor
    metrics: Optional[EvalMetrics] = None
    error: Optional[ErrorInfo] = None
    delta_dice: Optional[float] = None
    delta_hd95: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "removed_module": self.removed_module,
            "implementation": self.implementation.to_dict(),
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "error": self.error.to_dict() if self.error is not None else None,
            "delta_dice": self.delta_dice,
            "delta_hd95": self.delta_hd95,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationVariant":
        return cls(
            removed_module=data["removed_module"],
            implementation=ImplementationDescriptor.from_dict(data["implementation"]),
            metrics=EvalMetrics.from_dict(data["metrics"]) if data.get("metrics") else None,
            error=ErrorInfo.from_dict(data["error"]) if data.get("error") else None,
            delta_dice=data.get("delta_dice"),
            delta_hd95=data.get("delta_hd95"),
        )


@dataclass(frozen=True)
class EvidenceBundle:
    proposal_record: Dict[str, Any]
    experimental_record: Dict[str, Any]
    ablation_record: List[Dict[str, Any]]
    implementation: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "proposal_record": self.proposal_record,
            "experimental_record": self.experimental_record,
            "ablation_record": self.ablation_record,
            "implementation": self.implementation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvidenceBundle":
        return cls(
            proposal_record=data["proposal_record"],
            experimental_record=data["experimental_record"],
            ablation_record=list(data["ablation_record"]),
            implementation=data["implementation"],
        )

    @classmethod
    def from_json(cls, text: str) -> "EvidenceBundle":
        return cls.from_dict(json.loads(text))


@dataclass
class ExperimentRecord:
    config: ExperimentConfig
    baseline_name: str
    baseline_metrics: EvalMetrics
    tree: SearchTree
    steps: List[StepRecord] = field(default_factory=list)
    digests: List[CycleDigest] = field(default_factory=list)
    win: WinOutcome = WinOutcome.NO_WIN
    fsp: Optional[int] = None
    best_node_id: Optional[int] = None
    ablations: Optional[List[AblationVariant]] = None
    evidence: Optional[EvidenceBundle] = None
    aborted: Optional[str] = None

    @property
    def m0(self) -> float:
        return self.baseline_metrics.dice

    @property
    def dataset_id(self) -> str:
        return self.config.dataset_id

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def trials(self) -> List[TrialNode]:
        return self.tree.trials()

    @property
    def nodes(self) -> int:
        return len(self.trials)

    @property
    def best_node(self) -> Optional[TrialNode]:
        return self.tree.nodes.get(self.best_node_id) if self.best_node_id is not None else None

    @property
    def delta_dice(self) -> Optional[float]:
        best = self.best_node
        return best.metrics.dice - self.m0 if best is not None else None

    @property
    def delta_hd95(self) -> Optional[float]:
        best = self.best_node
        if best is None or best.metrics.hd95 is None or self.baseline_metrics.hd95 is None:
            return None
        return best.metrics.hd95 - self.baseline_metrics.hd95

    def summary_row(self) -> Dict[str, Any]:
        best = self.best_node
        return {
            "dataset_id": self.config.dataset_id,
            "variant": self.config.variant.value,
            "seed": self.config.seed,
            "win": self.win.value,
            "fsp": self.fsp,
            "nodes": self.nodes,
            "best_dice": best.metrics.dice if best is not None else None,
            "best_hd95": best.metrics.hd95 if best is not None else None,
            "delta_dice": self.delta_dice,
        }


# ---------------------------------------------------------------------------
# Pure decisions
# ---------------------------------------------------------------------------

def establish_baseline(dataset_id: str, bank: Sequence[Tuple[str, EvalMetrics]]) -> Tuple[str, float]:
    """Best baseline by Dice; ties go to the lexicographically smallest name."""
    if not bank:
        raise ConfigurationError(f"Empty baseline bank for dataset {dataset_id}")
    name, metrics = min(bank, key=lambda entry: (-entry[1].dice, entry[0]))
    return name, metrics.dice


def evaluate_win(best: EvalMetrics, baseline: EvalMetrics) -> WinOutcome:
    gap = best.dice - baseline.dice
    if gap > WIN_MARGIN:
        return WinOutcome.WIN_BY_DICE
    if abs(gap) <= WIN_MARGIN:
        if best.hd95 is None or baseline.hd95 is None:
            logger.warning("hd95 tiebreak skipped, metric missing dice_gap=%.4f", gap)
            return WinOutcome.NO_WIN
        if best.hd95 < baseline.hd95:
            return WinOutcome.WIN_BY_HD95
    return WinOutcome.NO_WIN


def compete(result_a: Candidate, result_b: Candidate) -> Tuple[Candidate, Optional[float]]:
    """
    Higher Dice wins, ties go to A, a valid result beats an error. Returns the
    winner and the loser's Dice (None when the loser errored).
    """
    if result_a.metrics is not None and result_b.metrics is not None:
        if result_a.metrics.dice >= result_b.metrics.dice:
            return result_a, result_b.metrics.dice
        return result_b, result_a.metrics.dice
    if result_a.metrics is not None:
        return result_a, None
    if result_b.metrics is not None:
        return result_b, None
    return result_a, None


def first_success_index(tree: SearchTree) -> Optional[int]:
    for position, node in enumerate(tree.trials(), start=1):
        if node.metrics is not None and node.metrics.dice > tree.baseline_m0:
            return position
    return None


def best_trial(tree: SearchTree) -> Optional[TrialNode]:
    best = None
    for node in tree.trials():
        if node.metrics is None:
            continue
        if best is None or node.metrics.dice > best.metrics.dice:
            best = node
    return best


# ---------------------------------------------------------------------------
# Running state
# ---------------------------------------------------------------------------

class RunState:
    """Mutable state of one run; advanced one committed trial at a time by `step_discovery`."""

    def __init__(self, config: ExperimentConfig, workbench: Workbench, generators: Optional[Generators] = None):
        self.config = config
        self.workbench = workbench
        self.generators = generators or Generators()
        self.params = config.qwbe_params
        if len(config.proposal_ids) < self.params.proposal_budget:
            # the search can only open branches for proposals it was given
            self.params = replace(self.params, proposal_budget=len(config.proposal_ids))
        if config.variant is not Variant.FULL:
            logger.debug("ablated variant=%s", config.variant.value)

        bank = workbench.build_baseline_bank(config.dataset_id)
        self.baseline_name, m0 = establish_baseline(config.dataset_id, bank)
        self.baseline_metrics = dict(bank)[self.baseline_name]
        self.plans = workbench.plan_and_preprocess(config.dataset_id, [config.configuration])
        self.tree = SearchTree(m0, self.params)

        self.impls: Dict[int, Any] = {}
        self.feedback: Dict[int, Union[DiagnosticReport, CompletenessAudit]] = {}
        self.histories: Dict[int, CycleHistory] = {}
        self.raw_logs: Dict[int, List[str]] = {}
        self.closed: set = set()
        self.digests: List[CycleDigest] = []
        self.global_memory = GlobalMemory(size_cap=config.memory_caps.global_cap)
        self.seed = Seed(artifact_ref=f"baseline:{self.baseline_name}", metric=m0, memory=self.global_memory)
        self.seed_impl: Any = None
        self.steps: List[StepRecord] = []
        self.turn = 0
        self.done = False

    @property
    def m0(self) -> float:
        return self.tree.baseline_m0

    def best_before(self) -> float:
        best = best_trial(self.tree)
        return max(self.m0, best.metrics.dice) if best is not None else self.m0

    # -- cycles --------------------------------------------------------------

    def open_branch(self) -> int:
        proposal_id = self.config.proposal_ids[self.tree.k]
        branch = self.tree.create_branch(proposal_id, self.baseline_metrics)
        root = branch.root
        self.impls[root.node_id] = self.workbench.initial_implementation(
            self.config.dataset_id, proposal_id, self.seed_impl
        )
        history = CycleHistory(cycle_id=branch.branch_id, proposal_id=proposal_id, seed_metric=self.seed.metric)
        baseline_record = ModificationRecord(
            summary=f"seeded from {self.seed.artifact_ref}",
            what_changed="",
            why_outcome_differed="",
            source_trial=root.node_id,
        )
        append_entry(history, CycleEntry.build(root, baseline_record))
        self.histories[branch.branch_id] = history
        self.raw_logs[branch.branch_id] = []
        return branch.branch_id

    def close_cycle(self, branch_id: int) -> None:
        if branch_id in self.closed:
            return
        self.closed.add(branch_id)
        history = self.histories[branch_id]
        digest = digest_cycle(history, self.generators.summarizer, self.config.memory_caps.digest_cap)
        self.global_memory = merge_global(self.global_memory, digest)
        prior = self.seed
        self.seed = make_seed(history, self.global_memory, prior)
        if self.seed.artifact_ref != prior.artifact_ref:
            self.seed_impl = self.impls[history.best_trial]
        self.digests.append(digest)
        logger.debug("cycle closed cycle=%s best=%s seed=%s", branch_id, history.best_metric, self.seed.artifact_ref)

    def close_all(self) -> None:
        for branch in self.tree.branches:
            self.close_cycle(branch.branch_id)

    # -- guidance ------------------------------------------------------------

    def guidance(self, parent: TrialNode, agent: Agent) -> Tuple[Suggestion, ...]:
        if parent.is_baseline:
            return (IMPLEMENT_PROPOSAL,)
        feedback = self.feedback.get(parent.node_id)
        if isinstance(feedback, DiagnosticReport):
            picked = partition_suggestions(feedback.suggestions, agent)
        elif isinstance(feedback, CompletenessAudit):
            picked = partition_suggestions(feedback.prioritized_suggestions, agent)
        else:
            picked = []
        return tuple(picked) or (REFINE_BEST,)

    def context(self, branch_id: int) -> str:
        if self.config.variant is Variant.MINUS_LRM:
            return render_raw_context(self.raw_logs[branch_id], self.global_memory)
        return render_context(self.histories[branch_id], self.global_memory, self.config.memory_caps.render_limits())

    def diagnose(
        self, node: TrialNode, winner: Candidate, parent: TrialNode, best_before: float, context: str
    ) -> Tuple[DiagnosticMode, Union[DiagnosticReport, CompletenessAudit], str, str]:
        proposal_id = self.tree.branch(node.branch_id).proposal_id
        modules = self.workbench.proposal_modules(self.config.dataset_id, proposal_id)
        descriptor = winner.impl.descriptor() if hasattr(winner.impl, "descriptor") else ImplementationDescriptor(proposal_id)
        if node.metrics is None:
            mode = DiagnosticMode.FAILURE
        else:
            mode = choose_mode(node.metrics.dice, best_before)

        generator = self.generators.diagnostic
        if mode is DiagnosticMode.OPTIMIZATION:
            audit = generate_audit(modules, descriptor, generator, self.config.max_retries)
            if self.config.variant is Variant.MINUS_DDF:
                audit = replace(audit, prioritized_suggestions=audit.prioritized_suggestions[:1])
            return mode, audit, "", ""

        ctx = DiagnosticContext(
            proposal_id=proposal_id,
            proposal_modules=modules,
            implementation=descriptor,
            best_metric=best_before,
            trial_metric=node.dice,
            parent_metric=parent.dice,
            error=node.error,
            history=context,
        )
        report = generate_diagnosis(ctx, generator, self.config.max_retries)
        if self.config.variant is Variant.MINUS_DDF:
            report = replace(report, suggestions=(single_point(report),))
        excerpt = "; ".join(s.description for s in partition_suggestions(report.suggestions, Agent.A))
        return mode, report, excerpt, outcome_label(ctx)

    # -- execution -----------------------------------------------------------

    def run_candidate(self, parent_impl: Any, suggestions: Tuple[Suggestion, ...], mode: LeafMode, agent: Agent) -> Candidate:
        impl = self.workbench.apply_modification(parent_impl, suggestions, mode, agent, salt=str(len(self.steps)))
        ref = getattr(impl, "path", "")
        if not self.workbench.verify_one_epoch(impl):
            error = ErrorInfo(ErrorClass.VERIFICATION, "one-epoch verification failed")
            return Candidate(agent, suggestions, error=error, artifact_ref=ref, impl=impl, log="verification epoch failed")
        out = self.workbench.training_network(self.config.dataset_id, self.config.configuration, impl, self.plans)
        if isinstance(out, ErrorInfo):
            return Candidate(agent, suggestions, error=out, artifact_ref=ref, impl=impl, log=out.message)
        metrics = self.workbench.evaluate(self.config.dataset_id, out.result_ref)
        return Candidate(agent, suggestions, metrics=metrics, artifact_ref=ref, impl=impl, log=out.log)

    def next_action(self):
        if self.config.variant is Variant.MINUS_QWBE and self.tree.phase is Phase.EXPLORE:
            action = round_robin_action(self.tree, self.params, self.turn)
            self.turn += 1
            return action
        return select_action(self.tree, self.params)

    def partial_record(self, reason: Optional[str] = None) -> ExperimentRecord:
        best = best_trial(self.tree)
        return ExperimentRecord(
            config=self.config,
            baseline_name=self.baseline_name,
            baseline_metrics=self.baseline_metrics,
            tree=self.tree,
            steps=list(self.steps),
            digests=list(self.digests),
            fsp=first_success_index(self.tree),
            best_node_id=best.node_id if best is not None else None,
            aborted=reason,
        )


def step_discovery(state: RunState) -> RunState:
    """Commit one trial: select, implement twice, train, compete, record, diagnose."""
    tree = state.tree
    action = state.next_action()
    if action is None:
        state.done = True
        return state

    if action.kind is ActionKind.CREATE_BRANCH:
        branch_id = state.open_branch()
        parent_id, mode = tree.branch(branch_id).root.node_id, LeafMode.IMPROVE
    elif action.kind is ActionKind.EXPAND_BRANCH:
        branch_id = action.branch_id
        try:
            parent_id, mode = select_leaf(tree.branch(branch_id), state.params)
        except BranchExhausted:
            tree.branch(branch_id).exhausted = True
            state.close_cycle(branch_id)
            logger.debug("branch exhausted branch=%s", branch_id)
            return state
    else:
        parent_id, mode = action.node_id, LeafMode.IMPROVE
        branch_id = tree.nodes[parent_id].branch_id

    parent = tree.nodes[parent_id]
    best_before = state.best_before()
    context = state.context(branch_id)
    parent_impl = state.impls[parent_id]
    candidates = tuple(
        state.run_candidate(parent_impl, state.guidance(parent, agent), mode, agent) for agent in (Agent.A, Agent.B)
    )
    winner, losing_metric = compete(*candidates)

    status = classify_status(winner.metrics.dice if winner.metrics else None, state.m0, winner.error is not None)
    node = tree.add_trial(
        branch_id,
        parent_id,
        winner.agent.value,
        status,
        metrics=winner.metrics,
        error=winner.error,
        mode=mode,
        modification_ref=f"step:{len(state.steps)}",
    )
    state.impls[node.node_id] = winner.impl
    state.raw_logs[branch_id].append(winner.log)

    modification = summarize_trial(
        winner.log,
        node,
        state.generators.summarizer,
        change="; ".join(s.description for s in winner.suggestions),
        parent_metrics=parent.metrics,
    )
    feedback_mode, feedback, excerpt, label = state.diagnose(node, winner, parent, best_before, context)
    state.feedback[node.node_id] = feedback
    append_entry(
        state.histories[branch_id],
        CycleEntry.build(
            node,
            modification,
            excerpt=excerpt,
            label=label,
            losing_agent_metric=losing_metric,
            excerpt_limit=state.config.memory_caps.excerpt_limit,
        ),
    )

    state.steps.append(StepRecord(
        step=len(state.steps),
        action=action.kind.value,
        branch_id=branch_id,
        parent_id=parent_id,
        mode=mode,
        node_id=node.node_id,
        winner=winner.agent,
        candidates=candidates,
        context_chars=len(context),
        feedback_mode=feedback_mode,
        feedback=feedback.to_dict(),
        modification=modification,
    ))
    logger.debug(
        "step=%s action=%s node=%s dice=%s status=%s",
        len(state.steps) - 1, action.kind.value, node.node_id, node.dice, status.value,
    )

    if not tree.is_available(tree.branch(branch_id)):
        state.close_cycle(branch_id)
    return state


# ---------------------------------------------------------------------------
# Ablation and evidence
# ---------------------------------------------------------------------------

def build_ablations(
    impl: Any, workbench: Workbench, config: ExperimentConfig, plans: Plans, full_metrics: EvalMetrics
) -> List[AblationVariant]:
    """Retrain the winning implementation once per module, that module replaced by a minimal substitute."""
    variants = []
    for module, _ in getattr(impl, "modules", ()):
        ablated = workbench.ablate(impl, module)
        out = workbench.training_network(config.dataset_id, config.configuration, ablated, plans)
        descriptor = ablated.descriptor()
        if isinstance(out, ErrorInfo):
            variants.append(AblationVariant(module, descriptor, error=out))
            continue
        metrics = workbench.evaluate(config.dataset_id, out.result_ref)
        delta_hd95 = None
        if metrics.hd95 is not None and full_metrics.hd95 is not None:
            delta_hd95 = metrics.hd95 - full_metrics.hd95
        variants.append(AblationVariant(
            module, descriptor, metrics=metrics, delta_dice=metrics.dice - full_metrics.dice, delta_hd95=delta_hd95
        ))
        logger.debug("ablation module=%s dice=%.4f", module, metrics.dice)
    return variants


def _per_case_test(best: EvalMetrics, baseline: EvalMetrics) -> Optional[Dict[str, Any]]:
    if not best.per_case or len(best.per_case) != len(baseline.per_case):
        return None
    try:
        result = wilcoxon_signed_rank(
            PairedSamples.from_columns(best.per_case, baseline.per_case), alternative="greater"
        )
    except DegenerateSampleError:
        return None
    return result.to_dict()


def export_evidence(record: ExperimentRecord) -> EvidenceBundle:
    if not record.win.is_win or record.best_node is None:
        raise EvidenceRefused(f"Run {record.config.dataset_id}/{record.config.seed} did not win; no evidence exported")
    if record.ablations is None:
        raise EvidenceRefused("Ablations have not been run for this record")
    best = record.best_node
    proposal_id = record.tree.branch(best.branch_id).proposal_id
    implementation = ""
    for step in record.steps:
        if step.node_id == best.node_id:
            implementation = next(c.artifact_ref for c in step.candidates if c.agent is step.winner)
    modules = []
    if record.config.landscape is not None:
        modules = [m.name for m in record.config.landscape.proposal(proposal_id).modules]
    return EvidenceBundle(
        proposal_record={"dataset_id": record.config.dataset_id, "proposal_id": proposal_id, "modules": modules},
        experimental_record={
            "baseline": {"name": record.baseline_name, "metrics": record.baseline_metrics.to_dict()},
            "best": {"node_id": best.node_id, "metrics": best.metrics.to_dict()},
            "win": record.win.value,
            "fsp": record.fsp,
            "nodes": record.nodes,
            "per_case_wilcoxon": _per_case_test(best.metrics, record.baseline_metrics),
        },
        ablation_record=[a.to_dict() for a in record.ablations],
        implementation={"proposal_id": proposal_id, "artifact_ref": implementation},
    )


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def run_experiment(
    config: ExperimentConfig, workbench: Workbench, generators: Optional[Generators] = None
) -> ExperimentRecord:
    state = RunState(config, workbench, generators)
    step_limit = state.params.proposal_budget * (state.params.iteration_budget + 1)
    try:
        while not state.done and len(state.steps) < step_limit:
            step_discovery(state)
        state.close_all()
    except (WorkbenchError, GenerationFailure) as e:
        logger.error("run aborted dataset=%s seed=%s error=%s", config.dataset_id, config.seed, e)
        raise PipelineAborted(str(e), state.partial_record(reason=str(e))) from e

    record = state.partial_record()
    best = record.best_node
    if best is not None:
        record.win = evaluate_win(best.metrics, record.baseline_metrics)
    if record.win.is_win:
        record.ablations = build_ablations(state.impls[best.node_id], workbench, config, state.plans, best.metrics)
        record.evidence = export_evidence(record)

    logger.info(
        "run finished dataset=%s variant=%s seed=%s win=%s fsp=%s nodes=%s",
        config.dataset_id, config.variant.value, config.seed, record.win.value, record.fsp, record.nodes,
    )
    return record


def simulate(config: ExperimentConfig, generators: Optional[Generators] = None) -> ExperimentRecord:
    """Run a configuration against a fresh simulator built from its landscape."""
    if config.landscape is None:
        raise ConfigurationError("simulation needs a landscape")
    workbench = Simulator(config.seed, {config.dataset_id: config.landscape})
    return run_experiment(config, workbench, generators)


def run_ablation_suite(
    config: ExperimentConfig, variants: Sequence[Variant], seeds: Sequence[int], workers: int = 1
) -> List[ExperimentRecord]:
    """One simulated run per (variant, seed), fanned out over processes; sorted by (variant, seed)."""
    configs = [replace(config, variant=Variant(v), seed=s) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(simulate, configs))
    else:
        records = [simulate(c) for c in configs]
    return sorted(records, key=lambda r: (VARIANT_ORDER[r.config.variant], r.config.seed))
