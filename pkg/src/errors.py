"""Exception hierarchy shared by the engine, the CLI and the MCP tools."""
from typing import Any, Optional


class ResearchLoopError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigurationError(ResearchLoopError):
    """Invalid or missing configuration (bad YAML, empty bank, unknown variant...)."""


class StructuralError(ResearchLoopError):
    """The search tree violates a structural precondition (e.g. no Baseline root)."""


class BranchExhausted(ResearchLoopError):
    """Every leaf of a branch is excluded from expansion."""

    def __init__(self, branch_id: int):
        super().__init__(f"Branch {branch_id} has no expandable leaf")
        self.branch_id = branch_id


class DuplicateEntryError(ResearchLoopError):
    """A cycle history already holds an entry for this trial."""


class GenerationFailure(ResearchLoopError):
    """A generator kept producing invalid output after all retries."""

    def __init__(self, message: str, violations: Optional[list] = None):
        super().__init__(message)
        self.violations = list(violations or [])


class WorkbenchError(ResearchLoopError):
    """The workbench backend is unavailable or failed outside the trial contract."""


class UnknownDatasetError(WorkbenchError):
    """The dataset is not registered with the workbench."""


class ResultConsumedError(WorkbenchError):
    """A training result handle was evaluated twice (or never issued)."""


class TraceParseError(ResearchLoopError):
    """A trace line (or file) could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None, offset: Optional[int] = None):
        location = []
        if line_number is not None:
            location.append(f"line {line_number}")
        if offset is not None:
            location.append(f"byte {offset}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.line_number = line_number
        self.offset = offset


class IncompatibleVersionError(ResearchLoopError):
    """A record file was written with an unsupported format version."""


class DegenerateSampleError(ResearchLoopError, ValueError):
    """Statistic undefined for this sample (all-zero differences, zero variance)."""


class EvidenceRefused(ResearchLoopError):
    """Evidence export requested for a run without a win."""


class PipelineAborted(ResearchLoopError):
    """A run stopped on an infrastructure failure; the partial record is attached."""

    def __init__(self, message: str, partial_record: Any = None):
        super().__init__(message)
        self.partial_record = partial_record
