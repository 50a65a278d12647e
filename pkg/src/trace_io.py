"""
Reading agent trace corpora and persisting experiment records.

Corpus layout:

    <dataset_id>/<experiment_timestamp>/<stage_dir>/
        events/openhands_events_<ts>.jsonl
        summaries/openhands_summary_<ts>.md
        codes/<ts>_<hash>_experiment_code.py

Event files are JSON lines, one event per line. Record files are JSON lines
too: a format header followed by one `kind`-tagged line per record section,
with sorted keys so the same record always yields the same bytes.
"""
import csv
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from .config import MAX_LINE_BYTES
from .errors import IncompatibleVersionError, TraceParseError
from .lrm import CycleDigest
from .models import EvalMetrics
from .pipeline import AblationVariant, EvidenceBundle, ExperimentConfig, ExperimentRecord, StepRecord, WinOutcome
from .qwbe import SearchTree
from .stats import VariantSummary

logger = logging.getLogger(__name__)

RECORD_FORMAT = "research-loop-record"
RECORD_VERSION = 1

SUMMARY_FIELDS = ("dataset_id", "variant", "seed", "win", "fsp", "nodes", "best_dice", "best_hd95", "delta_dice")
ABLATION_FIELDS = ("variant", "runs", "wins", "win_rate", "mean_delta_dice_pp", "mean_fsp", "mean_nodes")

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

class EventType(str, Enum):
    SYSTEM_PROMPT = "SystemPromptEvent"
    MESSAGE = "MessageEvent"
    ACTION = "ActionEvent"
    OBSERVATION = "ObservationEvent"
    UNKNOWN = "Unknown"


_KNOWN_TYPES = {t.value: t for t in EventType if t is not EventType.UNKNOWN}


@dataclass(frozen=True)
class LlmMessage:
    role: str
    content_preview: str
    content_length: int


@dataclass(frozen=True)
class AgentEvent:
    timestamp: datetime
    event_type: EventType
    event_str: str
    llm_message: Optional[LlmMessage] = None
    raw_type: str = ""

    @property
    def type_name(self) -> str:
        return self.raw_type or self.event_type.value


def parse_event_line(line: Union[str, bytes], line_number: Optional[int] = None, offset: Optional[int] = None) -> AgentEvent:
    """Parse one event line. Unknown event types are kept, tagged Unknown with their raw name."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TraceParseError(f"invalid utf-8: {e}", line_number, offset) from e
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise TraceParseError(f"malformed JSON: {e.msg}", line_number, (offset or 0) + e.pos) from e
    if not isinstance(data, dict):
        raise TraceParseError("event must be a JSON object", line_number, offset)

    try:
        timestamp = datetime.fromisoformat(data["timestamp"])
        raw_type = data["event_type"]
        if not isinstance(raw_type, str):
            raise TypeError("event_type must be a string")
        event_str = data.get("event_str", "")
        if not isinstance(event_str, str):
            raise TypeError("event_str must be a string")
        message = None
        raw_message = data.get("llm_message")
        if raw_message is not None:
            length = int(raw_message.get("content_length", 0))
            if length < 0:
                raise ValueError("content_length must be non-negative")
            message = LlmMessage(
                role=str(raw_message.get("role", "")),
                content_preview=str(raw_message.get("content_preview", "")),
                content_length=length,
            )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise TraceParseError(f"invalid event: {e}", line_number, offset) from e

    event_type = _KNOWN_TYPES.get(raw_type, EventType.UNKNOWN)
    return AgentEvent(
        timestamp=timestamp,
        event_type=event_type,
        event_str=event_str,
        llm_message=message,
        raw_type="" if event_type is not EventType.UNKNOWN else raw_type,
    )


def serialize_event(event: AgentEvent) -> str:
    data: Dict[str, Any] = {
        "timestamp": event.timestamp.isoformat(timespec="microseconds"),
        "event_type": event.type_name,
        "event_str": event.event_str,
    }
    if event.llm_message is not None:
        data["llm_message"] = {
            "role": event.llm_message.role,
            "content_preview": event.llm_message.content_preview,
            "content_length": event.llm_message.content_length,
        }
    return json.dumps(data, ensure_ascii=False)


@dataclass
class Session:
    path: Path
    events: List[AgentEvent] = field(default_factory=list)
    summary_path: Optional[Path] = None
    failures: List[TraceParseError] = field(default_factory=list)

    def histogram(self) -> Dict[str, int]:
        return dict(sorted(Counter(e.type_name for e in self.events).items()))


def _iter_lines(path: Path, max_line_bytes: int) -> Iterator[Tuple[int, int, Optional[bytes]]]:
    """Yield (line_number, byte_offset, raw_line); raw_line is None for an oversized line."""
    offset = 0
    with path.open("rb") as f:
        line_number = 0
        while True:
            raw = f.readline(max_line_bytes + 1)
            if not raw:
                return
            line_number += 1
            start = offset
            offset += len(raw)
            if len(raw) > max_line_bytes and not raw.endswith(b"\n"):
                while raw and not raw.endswith(b"\n"):
                    raw = f.readline(max_line_bytes + 1)
                    offset += len(raw)
                yield line_number, start, None
                continue
            yield line_number, start, raw


def _summary_for(path: Path) -> Optional[Path]:
    stamp = path.stem.replace("openhands_events_", "", 1)
    candidate = path.parent.parent / "summaries" / f"openhands_summary_{stamp}.md"
    return candidate if candidate.exists() else None


def load_session(path: PathLike, tolerance: float = 0.0, max_line_bytes: int = MAX_LINE_BYTES) -> Session:
    """
    Stream-parse one event file. With the default tolerance of 0 any bad line
    fails the session; otherwise up to that fraction of lines may be skipped.
    """
    path = Path(path)
    session = Session(path=path, summary_path=_summary_for(path))
    total = 0
    for line_number, offset, raw in _iter_lines(path, max_line_bytes):
        if raw is not None and not raw.strip():
            continue
        total += 1
        if raw is None:
            session.failures.append(TraceParseError(f"line exceeds {max_line_bytes} bytes", line_number, offset))
            continue
        try:
            session.events.append(parse_event_line(raw, line_number, offset))
        except TraceParseError as e:
            session.failures.append(e)

    if session.failures and len(session.failures) > tolerance * total:
        raise session.failures[0]
    if session.failures:
        logger.warning("session lines skipped path=%s failed=%s total=%s", path, len(session.failures), total)
    session.events.sort(key=lambda e: e.timestamp)
    return session


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageCounts:
    events: int = 0
    summaries: int = 0
    codes: int = 0


@dataclass(frozen=True)
class CorpusIndex:
    root: Path
    datasets: Tuple[str, ...]
    experiments: Tuple[Tuple[str, str], ...]
    stages: Dict[str, StageCounts]

    @property
    def totals(self) -> StageCounts:
        return StageCounts(
            events=sum(s.events for s in self.stages.values()),
            summaries=sum(s.summaries for s in self.stages.values()),
            codes=sum(s.codes for s in self.stages.values()),
        )


def _count(directory: Path, pattern: str) -> int:
    return sum(1 for p in directory.glob(pattern) if p.is_file()) if directory.is_dir() else 0


def scan_corpus(root: PathLike) -> CorpusIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Corpus root not found: {root}")
    datasets, experiments, stages = [], [], {}
    for dataset in sorted(p for p in root.iterdir() if p.is_dir()):
        datasets.append(dataset.name)
        for experiment in sorted(p for p in dataset.iterdir() if p.is_dir()):
            experiments.append((dataset.name, experiment.name))
            for stage in sorted(p for p in experiment.iterdir() if p.is_dir()):
                key = f"{dataset.name}/{experiment.name}/{stage.name}"
                stages[key] = StageCounts(
                    events=_count(stage / "events", "*.jsonl"),
                    summaries=_count(stage / "summaries", "*.md"),
                    codes=_count(stage / "codes", "*.py"),
                )
    return CorpusIndex(root=root, datasets=tuple(datasets), experiments=tuple(experiments), stages=stages)


def event_files(root: PathLike) -> List[Path]:
    return sorted(Path(root).glob("*/*/*/events/*.jsonl"))


def event_histogram(root: PathLike, workers: int = 1, tolerance: float = 0.0) -> Dict[str, int]:
    """Event-type counts across every session of a corpus."""
    files = event_files(root)
    load = lambda p: load_session(p, tolerance=tolerance)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sessions = list(pool.map(load, files))
    else:
        sessions = [load(p) for p in files]
    counts: Counter = Counter()
    for session in sessions:
        counts.update(session.histogram())
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# Experiment records
# ---------------------------------------------------------------------------

def _line(kind: str, payload: Mapping[str, Any]) -> str:
    return json.dumps({"kind": kind, **payload}, sort_keys=True, separators=(",", ":"))


def record_to_lines(record: ExperimentRecord) -> List[str]:
    snapshot = record.tree.snapshot()
    lines = [json.dumps({"format": RECORD_FORMAT, "version": RECORD_VERSION}, sort_keys=True)]
    lines.append(_line("config", record.config.to_dict()))
    lines.append(_line("baseline", {"name": record.baseline_name, "metrics": record.baseline_metrics.to_dict()}))
    lines.append(_line("tree", {
        "phase": snapshot["phase"],
        "k": snapshot["k"],
        "n_total": snapshot["n_total"],
        "baseline_m0": snapshot["baseline_m0"],
        "params": snapshot["params"],
    }))
    lines.extend(_line("branch", b) for b in snapshot["branches"])
    lines.extend(_line("node", n) for n in snapshot["nodes"])
    lines.extend(_line("trial", s.to_dict()) for s in record.steps)
    lines.extend(_line("digest", d.to_dict()) for d in record.digests)
    if record.ablations is not None:
        lines.extend(_line("ablation", a.to_dict()) for a in record.ablations)
    lines.append(_line("summary", {
        "win": record.win.value,
        "fsp": record.fsp,
        "best_node_id": record.best_node_id,
        "ablated": record.ablations is not None,
        "aborted": record.aborted,
        "evidence": record.evidence.to_dict() if record.evidence is not None else None,
    }))
    return lines


def persist_record(record: ExperimentRecord, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(record_to_lines(record)) + "\n", encoding="utf-8")
    return path


def records_from_lines(lines: Sequence[str]) -> ExperimentRecord:
    if not lines:
        raise TraceParseError("empty record file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise TraceParseError(f"malformed header: {e.msg}", 1) from e
    if header.get("format") != RECORD_FORMAT:
        raise IncompatibleVersionError(f"not a record file: format={header.get('format')!r}")
    if header.get("version") != RECORD_VERSION:
        raise IncompatibleVersionError(f"unsupported record version {header.get('version')!r}")

    sections: Dict[str, List[Dict[str, Any]]] = {}
    for number, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            data = json.loads(text)
            kind = data.pop("kind")
        except (json.JSONDecodeError, KeyError, AttributeError) as e:
            raise TraceParseError(f"malformed record line: {e}", number) from e
        sections.setdefault(kind, []).append(data)

    try:
        tree_header = sections["tree"][0]
        tree = SearchTree.from_snapshot({
            **tree_header,
            "branches": sections.get("branch", []),
            "nodes": sections.get("node", []),
        })
        baseline = sections["baseline"][0]
        summary = sections["summary"][0]
        record = ExperimentRecord(
            config=ExperimentConfig.from_dict(sections["config"][0]),
            baseline_name=baseline["name"],
            baseline_metrics=EvalMetrics.from_dict(baseline["metrics"]),
            tree=tree,
            steps=[StepRecord.from_dict(s) for s in sections.get("trial", [])],
            digests=[CycleDigest.from_dict(d) for d in sections.get("digest", [])],
            win=WinOutcome(summary["win"]),
            fsp=summary.get("fsp"),
            best_node_id=summary.get("best_node_id"),
            ablations=[AblationVariant.from_dict(a) for a in sections.get("ablation", [])] if summary.get("ablated") else None,
            evidence=EvidenceBundle.from_dict(summary["evidence"]) if summary.get("evidence") else None,
            aborted=summary.get("aborted"),
        )
    except (KeyError, IndexError, ValueError, TypeError) as e:
        raise TraceParseError(f"incomplete record: {e}") from e
    return record


def load_record(path: PathLike) -> ExperimentRecord:
    text = Path(path).read_text(encoding="utf-8")
    return records_from_lines(text.splitlines())


# ---------------------------------------------------------------------------
# CSV surfaces
# ---------------------------------------------------------------------------

def write_summary_csv(rows: Sequence[Mapping[str, Any]], path: PathLike, append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not append or not path.exists()
    with path.open("a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, extrasaction="ignore")
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in SUMMARY_FIELDS})
    return path


def _optional(value: str, cast):
    return cast(value) if value not in ("", None) else None


def read_summary_csv(path: PathLike) -> List[Dict[str, Any]]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as f:
        for raw in csv.DictReader(f):
            rows.append({
                "dataset_id": raw["dataset_id"],
                "variant": raw["variant"],
                "seed": int(raw["seed"]),
                "win": raw["win"],
                "fsp": _optional(raw.get("fsp"), int),
                "nodes": int(raw["nodes"]),
                "best_dice": _optional(raw.get("best_dice"), float),
                "best_hd95": _optional(raw.get("best_hd95"), float),
                "delta_dice": _optional(raw.get("delta_dice"), float),
            })
    return rows


def write_ablation_csv(summaries: Sequence[VariantSummary], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for summary in summaries:
            row = summary.to_dict()
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in ABLATION_FIELDS})
    return path


def read_pairs_csv(path: PathLike) -> Tuple[List[float], List[float]]:
    """First two columns of a CSV as float columns; a non-numeric first row is taken as a header."""
    a, b = [], []
    with Path(path).open(newline="", encoding="utf-8") as f:
        for number, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if number == 1:
                    continue
                raise ValueError(f"{path}: line {number} is not a numeric pair")
            a.append(x)
            b.append(y)
    return a, b
