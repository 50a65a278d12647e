"""
Layered reflective memory.

Three tiers: a bounded modification record per trial, a structured history per
cycle (one cycle per proposal branch), and a size-capped global narrative
merged from per-cycle digests. At a cycle boundary the best artifact and the
merged narrative are relayed forward together as the next seed.
"""
import bisect
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

from .errors import DuplicateEntryError
from .models import EvalMetrics, OutcomeStatus
from .qwbe import LeafMode, TrialNode
from .utils.helpers import pct_points, truncate

logger = logging.getLogger(__name__)

FINDINGS_CAP = 8
CROSS_CUTTING_CAP = 4
NARRATIVE_SEPARATOR = "\n"
MIN_SHRUNK_BLOCK = 16

_EPOCH_PATTERN = re.compile(r"epoch (\d+)")


@dataclass(frozen=True)
class MemoryCaps:
    """Character caps for every memory tier (configuration defaults)."""

    summary_cap: int = 400
    excerpt_limit: int = 500
    digest_cap: int = 2048
    global_cap: int = 4096
    context_cap: int = 24000

    def __post_init__(self):
        if min(self.summary_cap, self.excerpt_limit, self.digest_cap, self.global_cap, self.context_cap) <= 0:
            raise ValueError("memory caps must be positive")
        if self.digest_cap > self.global_cap:
            raise ValueError("digest_cap cannot exceed global_cap")

    def render_limits(self) -> "RenderLimits":
        return RenderLimits(excerpt_limit=self.excerpt_limit, context_cap=self.context_cap)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MemoryCaps":
        return cls(**{name: data[name] for name in cls.__dataclass_fields__ if name in data})


@dataclass(frozen=True)
class RenderLimits:
    excerpt_limit: int = 500
    context_cap: int = 24000


class Summarizer(Protocol):
    """Turns labelled text fields into one string no longer than `bound`."""

    bound: int

    def summarize(self, fields: Sequence[Tuple[str, str]]) -> str:
        ...


class ExtractiveSummarizer:
    """Reference summarizer: joins the non-empty fields in order and truncates."""

    def __init__(self, bound: int = 400):
        if bound <= 0:
            raise ValueError("bound must be positive")
        self.bound = bound

    def summarize(self, fields: Sequence[Tuple[str, str]]) -> str:
        parts = []
        for label, value in fields:
            value = " ".join(value.split())
            if not value:
                continue
            parts.append(f"{label}: {value}" if label else value)
        return truncate("; ".join(parts), self.bound)


# ---------------------------------------------------------------------------
# Trial tier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModificationRecord:
    summary: str
    what_changed: str
    why_outcome_differed: str
    source_trial: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModificationRecord":
        return cls(**data)


def summarize_trial(
    raw_log: str,
    result: TrialNode,
    s: Summarizer,
    change: str = "",
    parent_metrics: Optional[EvalMetrics] = None,
) -> ModificationRecord:
    """
    Distill a finished trial into a modification record.

    Only the epoch count is read from the raw log; the log itself is never
    stored, so nothing from it can leak into later contexts.
    """
    if result.metrics is None and result.error is None:
        raise ValueError("trial must carry metrics or an error")

    if result.error is not None:
        why = f"failed with {result.error.error_class.value} error"
    elif parent_metrics is not None:
        delta = result.metrics.dice - parent_metrics.dice
        why = f"dice {result.metrics.dice:.4f} vs parent {parent_metrics.dice:.4f} ({pct_points(delta)})"
    else:
        why = f"dice {result.metrics.dice:.4f}"

    what = change or ("repair of a failed implementation" if result.mode is LeafMode.REPAIR else "")

    log_facts = ""
    epochs = _EPOCH_PATTERN.findall(raw_log or "")
    if epochs:
        log_facts = f"trained {epochs[-1]} epochs"

    summary = truncate(s.summarize([("outcome", why), ("change", what), ("log", log_facts)]), s.bound)
    return ModificationRecord(
        summary=summary,
        what_changed=truncate(what, s.bound),
        why_outcome_differed=why,
        source_trial=result.node_id,
    )


def classify_status(m: Optional[float], m0: float, error: bool) -> OutcomeStatus:
    if (m is None) != error:
        raise ValueError("exactly one of a metric or an error is required")
    if error:
        return OutcomeStatus.ERROR
    if m > m0:
        return OutcomeStatus.SUCCESS
    return OutcomeStatus.UNDERPERFORMING


# ---------------------------------------------------------------------------
# Cycle tier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CycleEntry:
    trial_ref: int
    creation_index: int
    status: OutcomeStatus
    modification: ModificationRecord
    metrics: Optional[EvalMetrics] = None
    diagnostic_excerpt: str = ""
    diagnostic_label: str = ""
    losing_agent_metric: Optional[float] = None

    @classmethod
    def build(
        cls,
        node: TrialNode,
        modification: ModificationRecord,
        excerpt: str = "",
        label: str = "",
        losing_agent_metric: Optional[float] = None,
        excerpt_limit: int = 500,
    ) -> "CycleEntry":
        return cls(
            trial_ref=node.node_id,
            creation_index=node.creation_index,
            status=node.status,
            modification=modification,
            metrics=node.metrics,
            diagnostic_excerpt=truncate(excerpt, excerpt_limit),
            diagnostic_label=label,
            losing_agent_metric=losing_agent_metric,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trial_ref": self.trial_ref,
            "creation_index": self.creation_index,
            "status": self.status.value,
            "modification": self.modification.to_dict(),
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "diagnostic_excerpt": self.diagnostic_excerpt,
            "diagnostic_label": self.diagnostic_label,
            "losing_agent_metric": self.losing_agent_metric,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CycleEntry":
        return cls(
            trial_ref=data["trial_ref"],
            creation_index=data["creation_index"],
            status=OutcomeStatus(data["status"]),
            modification=ModificationRecord.from_dict(data["modification"]),
            metrics=EvalMetrics.from_dict(data["metrics"]) if data.get("metrics") else None,
            diagnostic_excerpt=data.get("diagnostic_excerpt", ""),
            diagnostic_label=data.get("diagnostic_label", ""),
            losing_agent_metric=data.get("losing_agent_metric"),
        )


@dataclass
class CycleHistory:
    cycle_id: int
    proposal_id: str
    seed_metric: float
    entries: List[CycleEntry] = field(default_factory=list)
    best_metric: Optional[float] = None
    best_trial: Optional[int] = None

    @property
    def best_artifact_ref(self) -> Optional[str]:
        return f"node:{self.best_trial}" if self.best_trial is not None else None


def append_entry(history: CycleHistory, entry: CycleEntry) -> CycleHistory:
    if any(existing.trial_ref == entry.trial_ref for existing in history.entries):
        raise DuplicateEntryError(f"Trial {entry.trial_ref} already recorded in cycle {history.cycle_id}")
    keys = [existing.creation_index for existing in history.entries]
    history.entries.insert(bisect.bisect_right(keys, entry.creation_index), entry)

    best = None
    for candidate in history.entries:
        if candidate.metrics is None:
            continue
        if best is None or candidate.metrics.dice > best.metrics.dice:
            best = candidate
    if best is not None:
        history.best_metric = best.metrics.dice
        history.best_trial = best.trial_ref
    return history


def _metrics_text(metrics: Optional[EvalMetrics]) -> str:
    if metrics is None:
        return "no metrics"
    if metrics.hd95 is None:
        return f"dice={metrics.dice:.4f}"
    return f"dice={metrics.dice:.4f} hd95={metrics.hd95:.2f}"


def _entry_line(entry: CycleEntry, excerpt_limit: int) -> str:
    line = (
        f"- trial {entry.creation_index} [{entry.status.value}] "
        f"{_metrics_text(entry.metrics)} | {entry.modification.summary}"
    )
    if entry.losing_agent_metric is not None:
        line += f" | rival dice={entry.losing_agent_metric:.4f}"
    if entry.diagnostic_excerpt:
        line += f" | diagnosis: {truncate(' '.join(entry.diagnostic_excerpt.split()), excerpt_limit)}"
    return line


def _global_section(global_memory: "GlobalMemory") -> str:
    return "## Global memory\n" + (global_memory.narrative or "(empty)")


def render_context(history: CycleHistory, global_memory: "GlobalMemory", limits: RenderLimits = RenderLimits()) -> str:
    """
    Agent-facing context: one line per cycle entry plus the global narrative.
    Oldest entry lines are dropped first when the context cap is reached.
    """
    best = f"{history.best_metric:.4f}" if history.best_metric is not None else "n/a"
    header = (
        f"# Cycle {history.cycle_id} | proposal {history.proposal_id} | "
        f"seed dice {history.seed_metric:.4f} | best dice {best}"
    )
    lines = [_entry_line(entry, limits.excerpt_limit) for entry in history.entries]
    tail = _global_section(global_memory)

    omitted = 0
    while True:
        body = ([f"- ({omitted} earlier trials omitted)"] if omitted else []) + lines
        text = "\n".join([header, *body, tail])
        if len(text) <= limits.context_cap or not lines:
            break
        lines = lines[1:]
        omitted += 1
    return truncate(text, limits.context_cap)


def render_raw_context(raw_logs: Sequence[str], global_memory: "GlobalMemory") -> str:
    """Context without reflective memory: every raw log, verbatim."""
    return "\n".join([*raw_logs, _global_section(global_memory)])


# ---------------------------------------------------------------------------
# Global tier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CycleDigest:
    cycle_id: int
    proposal_id: str
    key_findings: Tuple[str, ...]
    cross_cutting: Tuple[str, ...]
    best_metric: Optional[float]
    best_artifact_ref: Optional[str]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["key_findings"] = list(self.key_findings)
        data["cross_cutting"] = list(self.cross_cutting)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CycleDigest":
        return cls(
            cycle_id=data["cycle_id"],
            proposal_id=data["proposal_id"],
            key_findings=tuple(data.get("key_findings", [])),
            cross_cutting=tuple(data.get("cross_cutting", [])),
            best_metric=data.get("best_metric"),
            best_artifact_ref=data.get("best_artifact_ref"),
        )


def render_digest(digest: CycleDigest) -> str:
    """Single-line rendering merged into the global narrative."""
    best = f"{digest.best_metric:.4f}" if digest.best_metric is not None else "n/a"
    text = f"[cycle {digest.cycle_id} | {digest.proposal_id} | best dice {best}]"
    if digest.key_findings:
        text += " Findings: " + "; ".join(digest.key_findings) + "."
    else:
        text += " No findings."
    if digest.cross_cutting:
        text += " Cross-cutting: " + "; ".join(digest.cross_cutting) + "."
    return text


def digest_cycle(history: CycleHistory, s: Summarizer, digest_cap: int = 2048) -> CycleDigest:
    """Compress a finished cycle into key findings and cross-cutting insights."""
    trials = [entry for entry in history.entries if entry.status is not OutcomeStatus.BASELINE]

    def squeeze(text: str) -> str:
        return s.summarize([("", text)])

    successes = sorted(
        (entry for entry in trials if entry.status is OutcomeStatus.SUCCESS),
        key=lambda entry: (-entry.metrics.dice, entry.creation_index),
    )
    findings = [squeeze(entry.modification.summary) for entry in successes]
    for entry in trials:
        if entry.diagnostic_label == "regression" and entry.modification.what_changed:
            findings.append(squeeze(f"regressed: {entry.modification.what_changed}"))
    findings = findings[:FINDINGS_CAP]

    cross: List[str] = []
    if trials:
        errors = sum(1 for entry in trials if entry.status is OutcomeStatus.ERROR)
        if errors:
            cross.append(f"{errors} of {len(trials)} trials failed to execute")
        shortcuts = sum(1 for entry in trials if entry.diagnostic_label == "code_issue")
        if shortcuts:
            cross.append(f"implementation shortcuts flagged in {shortcuts} diagnoses")
        gaps = [
            entry.metrics.dice - entry.losing_agent_metric
            for entry in trials
            if entry.metrics is not None and entry.losing_agent_metric is not None
        ]
        if gaps:
            cross.append(f"rival implementations trailed winners by {100 * sum(gaps) / len(gaps):.2f} pp on average")
        if history.best_metric is not None:
            cross.append(f"best dice {history.best_metric:.4f} ({pct_points(history.best_metric - history.seed_metric)} vs seed)")
    cross = [squeeze(item) for item in cross[:CROSS_CUTTING_CAP]]

    digest = CycleDigest(
        cycle_id=history.cycle_id,
        proposal_id=history.proposal_id,
        key_findings=tuple(findings),
        cross_cutting=tuple(cross),
        best_metric=history.best_metric,
        best_artifact_ref=history.best_artifact_ref,
    )
    while len(render_digest(digest)) > digest_cap:
        if digest.cross_cutting:
            digest = replace(digest, cross_cutting=digest.cross_cutting[:-1])
        elif len(digest.key_findings) > 1:
            digest = replace(digest, key_findings=digest.key_findings[:-1])
        else:
            overflow = len(render_digest(digest)) - digest_cap
            first = digest.key_findings[0]
            digest = replace(digest, key_findings=(truncate(first, max(0, len(first) - overflow)),))
    return digest


@dataclass(frozen=True)
class GlobalMemory:
    narrative: str = ""
    size_cap: int = 4096
    cycles_merged: int = 0


def merge_global(global_memory: GlobalMemory, digest: CycleDigest) -> GlobalMemory:
    """
    Append the digest to the narrative. Over the cap, older blocks shrink in
    proportion to their length; the newest block is kept whole.
    """
    cap = global_memory.size_cap
    block = truncate(" ".join(render_digest(digest).split()), cap)
    blocks = global_memory.narrative.split(NARRATIVE_SEPARATOR) if global_memory.narrative else []

    narrative = NARRATIVE_SEPARATOR.join([*blocks, block])
    if len(narrative) > cap:
        available = cap - len(block) - len(NARRATIVE_SEPARATOR) * len(blocks)
        old_total = sum(len(b) for b in blocks)
        kept = []
        if available > 0 and old_total > 0:
            ratio = available / old_total
            for old in blocks:
                limit = int(len(old) * ratio)
                if limit >= MIN_SHRUNK_BLOCK:
                    kept.append(truncate(old, limit))
        narrative = NARRATIVE_SEPARATOR.join([*kept, block])

    logger.debug("global memory merged cycle=%s length=%s", digest.cycle_id, len(narrative))
    return GlobalMemory(narrative=narrative, size_cap=cap, cycles_merged=global_memory.cycles_merged + 1)


@dataclass(frozen=True)
class Seed:
    artifact_ref: str
    metric: float
    memory: GlobalMemory = field(default_factory=GlobalMemory)


def make_seed(history: CycleHistory, global_memory: GlobalMemory, prior: Seed) -> Seed:
    """Relay the cycle's best artifact if it beat the seed it started from, else keep the prior one."""
    if history.best_metric is not None and history.best_trial is not None and history.best_metric > history.seed_metric:
        return Seed(artifact_ref=history.best_artifact_ref, metric=history.best_metric, memory=global_memory)
    return Seed(artifact_ref=prior.artifact_ref, metric=prior.metric, memory=global_memory)
