"""Value types shared across the search, memory, feedback and pipeline modules."""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple


class OutcomeStatus(str, Enum):
    BASELINE = "baseline"
    SUCCESS = "success"
    UNDERPERFORMING = "underperforming"
    ERROR = "error"


class ErrorClass(str, Enum):
    SHAPE = "shape"
    NUMERIC = "numeric"
    MEMORY = "memory"
    VERIFICATION = "verification"


class SuggestionCategory(str, Enum):
    ARCHITECTURE = "architecture"
    HYPERPARAMETER = "hyperparameter"
    CODE_FIX = "code_fix"
    PROPOSAL_GAP = "proposal_gap"


class Priority(str, Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"

    @property
    def rank(self) -> int:
        """0 for High, 2 for Low; lower ranks are pursued first."""
        return _PRIORITY_RANK[self]


_PRIORITY_RANK = {Priority.HIGH: 0, Priority.MEDIUM: 1, Priority.LOW: 2}


class Agent(str, Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True)
class EvalMetrics:
    """Evaluation of one trained model: Dice is primary, HD95 only breaks ties."""

    dice: float
    hd95: Optional[float] = None
    per_class: Optional[Tuple[float, ...]] = None
    per_case: Tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice must lie in [0, 1], got {self.dice}")
        if self.hd95 is not None and self.hd95 < 0:
            raise ValueError(f"hd95 must be non-negative, got {self.hd95}")
        if self.per_class is not None and any(not 0.0 <= v <= 1.0 for v in self.per_class):
            raise ValueError("per_class values must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dice": self.dice,
            "hd95": self.hd95,
            "per_class": list(self.per_class) if self.per_class is not None else None,
            "per_case": list(self.per_case),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalMetrics":
        per_class = data.get("per_class")
        return cls(
            dice=data["dice"],
            hd95=data.get("hd95"),
            per_class=tuple(per_class) if per_class is not None else None,
            per_case=tuple(data.get("per_case") or ()),
        )


@dataclass(frozen=True)
class ErrorInfo:
    error_class: ErrorClass
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {"error_class": self.error_class.value, "message": self.message}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ErrorInfo":
        return cls(error_class=ErrorClass(data["error_class"]), message=data.get("message", ""))


@dataclass(frozen=True)
class Suggestion:
    """One actionable improvement; `target` names the proposal module it concerns, if any."""

    category: SuggestionCategory
    description: str
    priority: Priority = Priority.MEDIUM
    target: Optional[str] = None

    def __post_init__(self):
        if not self.description or not self.description.strip():
            raise ValueError("suggestion description must be non-empty")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "category": self.category.value,
            "description": self.description,
            "priority": self.priority.value,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Suggestion":
        return cls(
            category=SuggestionCategory(data["category"]),
            description=data["description"],
            priority=Priority(data.get("priority", Priority.MEDIUM.value)),
            target=data.get("target"),
        )


@dataclass(frozen=True)
class ImplementationDescriptor:
    """What an implementation contains, as seen by diagnostics and ablations.

    `modules` maps each proposal module to its state: faithful, shortcut,
    absent or substitute.
    """

    proposal_id: str
    modules: Tuple[Tuple[str, str], ...] = field(default_factory=tuple)
    artifact_ref: str = ""

    def module_states(self) -> Dict[str, str]:
        return dict(self.modules)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "proposal_id": self.proposal_id,
            "modules": [list(pair) for pair in self.modules],
            "artifact_ref": self.artifact_ref,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImplementationDescriptor":
        return cls(
            proposal_id=data["proposal_id"],
            modules=tuple((name, state) for name, state in data.get("modules", [])),
            artifact_ref=data.get("artifact_ref", ""),
        )
