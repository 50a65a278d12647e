"""
Quality-weighted branch exploration.

Holds the search tree (one branch per proposal, each rooted at a Baseline
node), turns raw Dice into normalized quality, scores branches with a
PUCT-style rule whose prior is a risk-averse function of branch quality, and
switches from multi-arm exploration to exploitation of the global best node
once any trial beats the baseline.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from .errors import BranchExhausted, StructuralError
from .models import ErrorInfo, EvalMetrics, OutcomeStatus
from .utils.helpers import clamp

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QwbeParams:
    c_puct: float = 1.5
    p: float = 3.0
    e: float = 1.0
    eps: float = 1e-9
    delta_buggy: float = 0.2
    debug_depth: int = 3
    proposal_budget: int = 3
    iteration_budget: int = 10

    def __post_init__(self):
        if self.c_puct <= 0:
            raise ValueError("c_puct must be positive")
        if self.p <= 0 or self.e <= 0 or self.eps <= 0:
            raise ValueError("p, e and eps must be positive")
        if not 0.0 <= self.delta_buggy <= 1.0:
            raise ValueError("delta_buggy must lie in [0, 1]")
        if self.debug_depth < 1 or self.proposal_budget < 1 or self.iteration_budget < 1:
            raise ValueError("debug_depth, proposal_budget and iteration_budget must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QwbeParams":
        known = {name: data[name] for name in cls.__dataclass_fields__ if name in data}
        return cls(**known)


class Phase(str, Enum):
    EXPLORE = "explore"
    EXPLOIT = "exploit"


class LeafMode(str, Enum):
    REPAIR = "repair"
    IMPROVE = "improve"


class ActionKind(str, Enum):
    EXPAND_BRANCH = "expand_branch"
    CREATE_BRANCH = "create_branch"
    EXPAND_GLOBAL_BEST = "expand_global_best"


@dataclass(frozen=True)
class SelectionAction:
    kind: ActionKind
    branch_id: Optional[int] = None
    node_id: Optional[int] = None

    @classmethod
    def expand(cls, branch_id: int) -> "SelectionAction":
        return cls(ActionKind.EXPAND_BRANCH, branch_id=branch_id)

    @classmethod
    def create(cls) -> "SelectionAction":
        return cls(ActionKind.CREATE_BRANCH)

    @classmethod
    def global_best(cls, node_id: int) -> "SelectionAction":
        return cls(ActionKind.EXPAND_GLOBAL_BEST, node_id=node_id)


@dataclass
class TrialNode:
    node_id: int
    branch_id: int
    parent_id: Optional[int]
    agent_label: Optional[str]
    status: OutcomeStatus
    metrics: Optional[EvalMetrics] = None
    error: Optional[ErrorInfo] = None
    q: Optional[float] = None
    stale: bool = False
    creation_index: int = 0
    modification_ref: Optional[str] = None
    mode: Optional[LeafMode] = None

    @property
    def is_baseline(self) -> bool:
        return self.status is OutcomeStatus.BASELINE

    @property
    def is_error(self) -> bool:
        return self.error is not None

    @property
    def dice(self) -> Optional[float]:
        return self.metrics.dice if self.metrics is not None else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_id": self.node_id,
            "branch_id": self.branch_id,
            "parent_id": self.parent_id,
            "agent_label": self.agent_label,
            "status": self.status.value,
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "error": self.error.to_dict() if self.error is not None else None,
            "q": self.q,
            "stale": self.stale,
            "creation_index": self.creation_index,
            "modification_ref": self.modification_ref,
            "mode": self.mode.value if self.mode is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrialNode":
        return cls(
            node_id=data["node_id"],
            branch_id=data["branch_id"],
            parent_id=data.get("parent_id"),
            agent_label=data.get("agent_label"),
            status=OutcomeStatus(data["status"]),
            metrics=EvalMetrics.from_dict(data["metrics"]) if data.get("metrics") else None,
            error=ErrorInfo.from_dict(data["error"]) if data.get("error") else None,
            q=data.get("q"),
            stale=data.get("stale", False),
            creation_index=data.get("creation_index", 0),
            modification_ref=data.get("modification_ref"),
            mode=LeafMode(data["mode"]) if data.get("mode") else None,
        )


@dataclass
class Branch:
    branch_id: int
    proposal_id: str
    nodes: List[TrialNode] = field(default_factory=list)
    q_cached: float = 0.0
    exhausted: bool = False

    @property
    def n_i(self) -> int:
        return sum(1 for node in self.nodes if not node.is_baseline)

    @property
    def root(self) -> TrialNode:
        for node in self.nodes:
            if node.is_baseline:
                return node
        raise StructuralError(f"Branch {self.branch_id} has no Baseline root")


# ---------------------------------------------------------------------------
# Quality
# ---------------------------------------------------------------------------

def normalize_quality(m: float, m0: float, params: QwbeParams = QwbeParams()) -> float:
    """Map a raw Dice onto [-1, 1] relative to the baseline Dice m0."""
    if not 0.0 <= m <= 1.0 or not 0.0 <= m0 <= 1.0:
        raise ValueError(f"metrics must lie in [0, 1], got m={m}, m0={m0}")
    if m >= m0:
        return (m - m0) / max(1.0 - m0, params.eps)
    return -min(1.0, ((m0 - m) / max(m0, params.eps)) ** params.e)


def error_node_quality(ancestor_q: float, params: QwbeParams = QwbeParams()) -> float:
    """An errored trial inherits its nearest valid ancestor's quality minus a fixed correction."""
    return clamp(ancestor_q - params.delta_buggy, -1.0, 1.0)


def branch_quality(branch: Branch) -> float:
    scored = [
        node.q for node in branch.nodes
        if not node.is_baseline and not node.stale and node.q is not None
    ]
    if not scored:
        return 0.0
    return sum(scored) / len(scored)


def prior_value(q: float, params: QwbeParams = QwbeParams()) -> float:
    return max(0.0, 1.0 + q) ** params.p


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------

class SearchTree:
    """
    The QWBE state. All mutation goes through `create_branch` and `add_trial`;
    scoring and selection functions only read it.
    """

    def __init__(self, baseline_m0: float, params: QwbeParams = QwbeParams()):
        if not 0.0 <= baseline_m0 <= 1.0:
            raise ValueError("baseline_m0 must lie in [0, 1]")
        self.baseline_m0 = baseline_m0
        self.params = params
        self.branches: List[Branch] = []
        self.nodes: Dict[int, TrialNode] = {}
        self.phase = Phase.EXPLORE
        self._counter = 0

    @property
    def k(self) -> int:
        return len(self.branches)

    @property
    def n_total(self) -> int:
        return self.k + sum(branch.n_i for branch in self.branches)

    def branch(self, branch_id: int) -> Branch:
        for branch in self.branches:
            if branch.branch_id == branch_id:
                return branch
        raise KeyError(f"Unknown branch {branch_id}")

    def children(self, node_id: int) -> List[TrialNode]:
        return [node for node in self.nodes.values() if node.parent_id == node_id]

    def trials(self) -> List[TrialNode]:
        """Non-Baseline nodes in creation order."""
        return sorted(
            (node for node in self.nodes.values() if not node.is_baseline),
            key=lambda node: node.creation_index,
        )

    def _next_index(self) -> int:
        index = self._counter
        self._counter += 1
        return index

    def create_branch(self, proposal_id: str, baseline_metrics: Optional[EvalMetrics] = None) -> Branch:
        branch = Branch(branch_id=self.k, proposal_id=proposal_id)
        index = self._next_index()
        root = TrialNode(
            node_id=index,
            branch_id=branch.branch_id,
            parent_id=None,
            agent_label=None,
            status=OutcomeStatus.BASELINE,
            metrics=baseline_metrics or EvalMetrics(dice=self.baseline_m0),
            q=0.0,
            creation_index=index,
        )
        branch.nodes.append(root)
        self.nodes[root.node_id] = root
        self.branches.append(branch)
        logger.debug("branch created branch=%s proposal=%s", branch.branch_id, proposal_id)
        return branch

    def nearest_valid_ancestor_q(self, node_id: Optional[int]) -> float:
        """q of the closest node at or above `node_id` that carries metrics."""
        current = self.nodes.get(node_id) if node_id is not None else None
        while current is not None:
            if current.is_baseline:
                return 0.0
            if current.metrics is not None and current.q is not None:
                return current.q
            current = self.nodes.get(current.parent_id) if current.parent_id is not None else None
        raise StructuralError("No valid ancestor: the tree must contain a Baseline root")

    def add_trial(
        self,
        branch_id: int,
        parent_id: int,
        agent_label: Optional[str],
        status: OutcomeStatus,
        metrics: Optional[EvalMetrics] = None,
        error: Optional[ErrorInfo] = None,
        mode: LeafMode = LeafMode.IMPROVE,
        modification_ref: Optional[str] = None,
    ) -> TrialNode:
        if (metrics is None) == (error is None):
            raise StructuralError("A trial carries exactly one of metrics or error")
        if status is OutcomeStatus.BASELINE:
            raise StructuralError("Baseline nodes are created with their branch")
        branch = self.branch(branch_id)
        parent = self.nodes.get(parent_id)
        if parent is None:
            raise StructuralError(f"Unknown parent node {parent_id}")

        if metrics is not None:
            q = normalize_quality(metrics.dice, self.baseline_m0, self.params)
        else:
            q = error_node_quality(self.nearest_valid_ancestor_q(parent_id), self.params)

        index = self._next_index()
        node = TrialNode(
            node_id=index,
            branch_id=branch_id,
            parent_id=parent_id,
            agent_label=agent_label,
            status=status,
            metrics=metrics,
            error=error,
            q=q,
            creation_index=index,
            modification_ref=modification_ref,
            mode=mode,
        )
        if mode is LeafMode.REPAIR and parent.is_error:
            parent.stale = True
        branch.nodes.append(node)
        self.nodes[node.node_id] = node
        branch.q_cached = branch_quality(branch)
        update_phase(self)
        return node

    def global_best(self) -> Optional[TrialNode]:
        """Non-stale node with the highest Dice; ties go to the earliest node."""
        best = None
        for node in sorted(self.nodes.values(), key=lambda n: n.creation_index):
            if node.stale or node.metrics is None:
                continue
            if best is None or node.metrics.dice > best.metrics.dice:
                best = node
        return best

    def is_available(self, branch: Branch) -> bool:
        return not branch.exhausted and branch.n_i < self.params.iteration_budget

    def snapshot(self) -> Dict[str, Any]:
        return {
            "phase": self.phase.value,
            "k": self.k,
            "n_total": self.n_total,
            "baseline_m0": self.baseline_m0,
            "branches": [
                {
                    "branch_id": b.branch_id,
                    "proposal_id": b.proposal_id,
                    "n_i": b.n_i,
                    "q_cached": b.q_cached,
                    "exhausted": b.exhausted,
                }
                for b in self.branches
            ],
            "nodes": [n.to_dict() for n in sorted(self.nodes.values(), key=lambda n: n.creation_index)],
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_snapshot(cls, data: Dict[str, Any]) -> "SearchTree":
        """Rebuild a tree from `snapshot()` output without replaying its trials."""
        tree = cls(data["baseline_m0"], QwbeParams.from_dict(data.get("params", {})))
        tree.phase = Phase(data["phase"])
        for entry in data.get("branches", []):
            tree.branches.append(Branch(
                branch_id=entry["branch_id"],
                proposal_id=entry["proposal_id"],
                q_cached=entry.get("q_cached", 0.0),
                exhausted=entry.get("exhausted", False),
            ))
        for raw in data.get("nodes", []):
            node = TrialNode.from_dict(raw)
            tree.nodes[node.node_id] = node
            tree.branch(node.branch_id).nodes.append(node)
            tree._counter = max(tree._counter, node.creation_index + 1)
        return tree


# ---------------------------------------------------------------------------
# Scoring and selection
# ---------------------------------------------------------------------------

def score_branch(branch: Branch, tree: SearchTree, params: QwbeParams = QwbeParams()) -> float:
    q = branch_quality(branch)
    exploration = params.c_puct * prior_value(q, params) * math.sqrt(tree.n_total) / (1 + branch.n_i)
    return q + exploration


def score_new_branch(tree: SearchTree, params: QwbeParams = QwbeParams()) -> Optional[float]:
    """Score of the virtual new-branch action; None once the proposal budget is spent."""
    if tree.k >= params.proposal_budget:
        return None
    return params.c_puct * math.sqrt(tree.n_total) / (1 + tree.k)


def select_action(tree: SearchTree, params: QwbeParams = QwbeParams()) -> Optional[SelectionAction]:
    """
    Next QWBE action, or None when nothing is left to expand.

    Explore: argmax over branch scores and the new-branch score; ties go to the
    lowest branch id and CreateBranch loses every tie. Exploit: the globally
    best node, as long as its branch still has budget.
    """
    if tree.phase is Phase.EXPLOIT:
        best = tree.global_best()
        if best is None or not tree.is_available(tree.branch(best.branch_id)):
            return None
        return SelectionAction.global_best(best.node_id)

    best_branch: Optional[Branch] = None
    best_score = -math.inf
    for branch in tree.branches:
        if not tree.is_available(branch):
            continue
        score = score_branch(branch, tree, params)
        if score > best_score:
            best_branch, best_score = branch, score

    new_score = score_new_branch(tree, params)
    if new_score is not None and (best_branch is None or new_score > best_score):
        return SelectionAction.create()
    if best_branch is None:
        return None
    return SelectionAction.expand(best_branch.branch_id)


def round_robin_action(tree: SearchTree, params: QwbeParams, turn: int) -> Optional[SelectionAction]:
    """Uniform allocation: turn t targets proposal slot t mod K, creating it when absent."""
    for offset in range(params.proposal_budget):
        slot = (turn + offset) % params.proposal_budget
        if slot == tree.k:
            return SelectionAction.create()
        if slot < tree.k and tree.is_available(tree.branches[slot]):
            return SelectionAction.expand(tree.branches[slot].branch_id)
    return None


def error_chain_length(branch: Branch, node: TrialNode) -> int:
    """Consecutive Error nodes ending at `node` along its ancestry."""
    by_id = {n.node_id: n for n in branch.nodes}
    length = 0
    current: Optional[TrialNode] = node
    while current is not None and current.is_error:
        length += 1
        current = by_id.get(current.parent_id) if current.parent_id is not None else None
    return length


def select_leaf(branch: Branch, params: QwbeParams = QwbeParams()) -> Tuple[int, LeafMode]:
    """
    Best leaf of a branch by q. An errored leaf within the debugging depth is
    repaired; one at or past the depth is skipped for the next-best leaf.
    """
    parents = {node.parent_id for node in branch.nodes}
    leaves = [node for node in branch.nodes if node.node_id not in parents and not node.stale]
    leaves.sort(key=lambda node: (-(node.q if node.q is not None else -math.inf), node.creation_index))
    for leaf in leaves:
        if leaf.is_error:
            if error_chain_length(branch, leaf) >= params.debug_depth:
                continue
            return leaf.node_id, LeafMode.REPAIR
        return leaf.node_id, LeafMode.IMPROVE
    raise BranchExhausted(branch.branch_id)


def update_phase(tree: SearchTree) -> SearchTree:
    """Latch into Exploit as soon as any non-stale trial strictly beats the baseline."""
    if tree.phase is Phase.EXPLOIT:
        return tree
    for node in tree.nodes.values():
        if node.is_baseline or node.stale or node.metrics is None:
            continue
        if node.metrics.dice > tree.baseline_m0:
            tree.phase = Phase.EXPLOIT
            logger.debug("phase switched to exploit node=%s dice=%.4f", node.node_id, node.metrics.dice)
            break
    return tree
