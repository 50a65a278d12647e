"""
Deterministic synthetic workbench.

Stands in for real planning, training and evaluation: every implementation has
a hidden latent Dice built from its proposal's base quality, the effects of
the modifications applied along its lineage and the state of its proposal
modules. All randomness is drawn from generators keyed by the run seed and
the implementation lineage, so a lineage maps to the same metrics in every run.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .errors import ConfigurationError, ResultConsumedError, UnknownDatasetError
from .models import Agent, ErrorClass, ErrorInfo, EvalMetrics, ImplementationDescriptor, Suggestion, SuggestionCategory
from .qwbe import LeafMode
from .utils.helpers import clamp, rng_for

logger = logging.getLogger(__name__)

FIXTURE_DIR = Path(__file__).parent / "fixtures"

MODULE_STATES = ("faithful", "shortcut", "absent", "substitute")
TRAINING_ERRORS = (ErrorClass.SHAPE, ErrorClass.NUMERIC, ErrorClass.MEMORY)
HD95_JITTER = 0.2
PER_CASE_SPREAD = 0.05
LOG_EPOCHS = 50

BANK_ARCHITECTURES = (
    "nnunet_3d_fullres",
    "unetr",
    "swin_unetr",
    "segresnet",
    "umamba_bot",
    "ukan",
    "transunet",
    "mednext",
    "attention_unet",
    "unetpp",
    "segformer3d",
    "dints",
    "vnet",
    "medformer",
)


def _fraction(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class EffectDistribution:
    mean: float = 0.0
    spread: float = 0.0

    def __post_init__(self):
        if self.spread < 0:
            raise ConfigurationError("effect spread must be non-negative")


@dataclass(frozen=True)
class ModuleSpec:
    """A proposal module, how the first implementation realizes it, and its effect once faithful."""

    name: str
    label: str = "faithful"
    effect: float = 0.0

    def __post_init__(self):
        if self.label not in MODULE_STATES:
            raise ConfigurationError(f"unknown module state {self.label!r} for {self.name}")


@dataclass(frozen=True)
class ProposalLandscape:
    proposal_id: str
    theta: float
    drift: float = 0.0
    modules: Tuple[ModuleSpec, ...] = ()

    def __post_init__(self):
        _fraction(f"theta of {self.proposal_id}", self.theta)


@dataclass(frozen=True)
class LandscapeConfig:
    proposals: Tuple[ProposalLandscape, ...]
    effects: Dict[SuggestionCategory, EffectDistribution] = field(default_factory=dict)
    noise: float = 0.0
    p_err: float = 0.0
    q_catch: float = 0.8
    h0: float = 30.0
    defect_rate: float = 0.0
    per_case_count: int = 40
    baseline_name: str = BANK_ARCHITECTURES[0]
    baseline_dice: float = 0.70
    baseline_hd95: float = 12.0
    bank_size: int = 14

    def __post_init__(self):
        if not self.proposals:
            raise ConfigurationError("a landscape needs at least one proposal")
        for name in ("p_err", "q_catch", "defect_rate", "baseline_dice"):
            _fraction(name, getattr(self, name))
        if self.baseline_dice <= 0.0:
            raise ConfigurationError("baseline_dice must be positive so the bank has a strict winner")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")
        if self.h0 <= 0 or self.baseline_hd95 < 0:
            raise ConfigurationError("h0 must be positive and baseline_hd95 non-negative")
        if self.bank_size < 1:
            raise ConfigurationError("the baseline bank needs at least one entry")
        if self.per_case_count < 1:
            raise ConfigurationError("per_case_count must be positive")

    @property
    def proposal_ids(self) -> List[str]:
        return [p.proposal_id for p in self.proposals]

    def proposal(self, proposal_id: str) -> ProposalLandscape:
        for p in self.proposals:
            if p.proposal_id == proposal_id:
                return p
        raise ConfigurationError(f"Unknown proposal {proposal_id!r}")

    def effect(self, category: SuggestionCategory) -> EffectDistribution:
        return self.effects.get(category, EffectDistribution())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "proposals": [
                {
                    "id": p.proposal_id,
                    "theta": p.theta,
                    "drift": p.drift,
                    "modules": [{"name": m.name, "label": m.label, "effect": m.effect} for m in p.modules],
                }
                for p in self.proposals
            ],
            "effects": {c.value: {"mean": d.mean, "spread": d.spread} for c, d in sorted(self.effects.items())},
            "noise": self.noise,
            "p_err": self.p_err,
            "q_catch": self.q_catch,
            "h0": self.h0,
            "defect_rate": self.defect_rate,
            "per_case_count": self.per_case_count,
            "baseline": {"name": self.baseline_name, "dice": self.baseline_dice, "hd95": self.baseline_hd95},
            "bank_size": self.bank_size,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LandscapeConfig":
        try:
            proposals = tuple(
                ProposalLandscape(
                    proposal_id=str(p["id"]),
                    theta=float(p["theta"]),
                    drift=float(p.get("drift", 0.0)),
                    modules=tuple(
                        ModuleSpec(str(m["name"]), m.get("label", "faithful"), float(m.get("effect", 0.0)))
                        for m in p.get("modules") or []
                    ),
                )
                for p in data.get("proposals") or []
            )
            effects = {
                SuggestionCategory(name): EffectDistribution(float(d.get("mean", 0.0)), float(d.get("spread", 0.0)))
                for name, d in (data.get("effects") or {}).items()
            }
            baseline = data.get("baseline") or {}
            return cls(
                proposals=proposals,
                effects=effects,
                noise=float(data.get("noise", 0.0)),
                p_err=float(data.get("p_err", 0.0)),
                q_catch=float(data.get("q_catch", 0.8)),
                h0=float(data.get("h0", 30.0)),
                defect_rate=float(data.get("defect_rate", 0.0)),
                per_case_count=int(data.get("per_case_count", 40)),
                baseline_name=str(baseline.get("name", BANK_ARCHITECTURES[0])),
                baseline_dice=float(baseline.get("dice", 0.70)),
                baseline_hd95=float(baseline.get("hd95", 12.0)),
                bank_size=int(data.get("bank_size", 14)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid landscape: {e}") from e


def load_landscape(source: Union[str, Path, Dict[str, Any]]) -> LandscapeConfig:
    """Load a landscape from a mapping, a YAML file, or the name of a bundled fixture."""
    if isinstance(source, dict):
        if "fixture" in source:
            return load_landscape(source["fixture"])
        return LandscapeConfig.from_dict(source)
    path = Path(source)
    if not path.suffix:
        path = FIXTURE_DIR / f"{source}.yaml"
    if not path.exists():
        raise ConfigurationError(f"Landscape not found: {source}")
    with path.open(encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return LandscapeConfig.from_dict(data)


def fixture_names() -> List[str]:
    return sorted(p.stem for p in FIXTURE_DIR.glob("*.yaml"))


@dataclass(frozen=True)
class Plans:
    dataset_id: str
    fingerprint: Dict[str, Any]
    configurations: Tuple[str, ...]


@dataclass(frozen=True)
class SimImplementation:
    dataset_id: str
    proposal_id: str
    lineage: Tuple[str, ...]
    modules: Tuple[Tuple[str, str], ...] = ()
    effects: Tuple[float, ...] = ()
    inherited: float = 0.0
    improve_depth: int = 0
    defect: Optional[ErrorClass] = None

    @property
    def path(self) -> str:
        return "/".join(self.lineage)

    def descriptor(self) -> ImplementationDescriptor:
        return ImplementationDescriptor(proposal_id=self.proposal_id, modules=self.modules, artifact_ref=self.path)


@dataclass(frozen=True)
class TrainOutput:
    result_ref: str
    log: str


class Simulator:
    """
    Workbench over synthetic landscapes, one per registered dataset.

    Apart from the pending-result table that enforces consume-once evaluation,
    every output is a pure function of (landscape, seed, lineage).
    """

    def __init__(self, seed: int, datasets: Optional[Dict[str, LandscapeConfig]] = None):
        self.seed = seed
        self.datasets: Dict[str, LandscapeConfig] = dict(datasets or {})
        self._pending: Dict[str, Tuple[str, SimImplementation, str]] = {}
        self._issued = 0

    def register(self, dataset_id: str, landscape: LandscapeConfig) -> None:
        self.datasets[dataset_id] = landscape

    def landscape(self, dataset_id: str) -> LandscapeConfig:
        try:
            return self.datasets[dataset_id]
        except KeyError:
            raise UnknownDatasetError(f"Dataset {dataset_id!r} is not registered") from None

    def proposal_modules(self, dataset_id: str, proposal_id: str) -> Tuple[str, ...]:
        return tuple(m.name for m in self.landscape(dataset_id).proposal(proposal_id).modules)

    # Planning and preprocessing ---------------------------------------------

    def plan_and_preprocess(self, dataset_id: str, configs: Sequence[str] = ("3d_fullres",)) -> Plans:
        self.landscape(dataset_id)
        rng = rng_for(self.seed, dataset_id, "plans")
        spacing = tuple(round(float(v), 3) for v in rng.uniform(0.5, 3.0, size=3))
        size_class = ("small", "medium", "large")[int(rng.integers(0, 3))]
        return Plans(
            dataset_id=dataset_id,
            fingerprint={"spacing": list(spacing), "size_class": size_class},
            configurations=tuple(sorted(set(configs))),
        )

    # Baselines ---------------------------------------------------------------

    def build_baseline_bank(self, dataset_id: str, seed: Optional[int] = None) -> List[Tuple[str, EvalMetrics]]:
        """Bank of named baselines; the configured winner is strictly best by Dice."""
        land = self.landscape(dataset_id)
        seed = self.seed if seed is None else seed
        names = [land.baseline_name] + [n for n in BANK_ARCHITECTURES if n != land.baseline_name]
        names += [f"arch_{i:02d}" for i in range(len(names), land.bank_size)]
        bank = []
        for name in names[: land.bank_size]:
            rng = rng_for(seed, dataset_id, "bank", name)
            if name == land.baseline_name:
                dice, hd95 = land.baseline_dice, land.baseline_hd95
            else:
                dice = max(0.0, land.baseline_dice - float(rng.uniform(0.005, 0.08)))
                hd95 = land.baseline_hd95 * (1.0 + float(rng.uniform(0.05, 0.5)))
            per_case = self._per_case(rng, dice, land.per_case_count)
            bank.append((name, EvalMetrics(dice=dice, hd95=hd95, per_case=per_case)))
        return bank

    # Implementations ---------------------------------------------------------

    def initial_implementation(
        self, dataset_id: str, proposal_id: str, seed_impl: Optional[SimImplementation] = None
    ) -> SimImplementation:
        """First implementation of a proposal, built on top of the relayed seed artifact."""
        land = self.landscape(dataset_id)
        proposal = land.proposal(proposal_id)
        inherited = self.gain(seed_impl) if seed_impl is not None else 0.0
        lineage = (proposal_id,)
        rng = rng_for(self.seed, dataset_id, "defect", *lineage)
        return SimImplementation(
            dataset_id=dataset_id,
            proposal_id=proposal_id,
            lineage=lineage,
            modules=tuple((m.name, m.label) for m in proposal.modules),
            inherited=inherited,
            defect=self._draw_defect(rng, land),
        )

    def apply_modification(
        self,
        impl: SimImplementation,
        suggestions: Sequence[Suggestion],
        mode: LeafMode,
        agent: Agent,
        salt: str = "",
    ) -> SimImplementation:
        """
        Repair clears the latent defect. Improve draws one effect per suggestion
        from its category's distribution, except that a targeted proposal-gap
        suggestion makes that module faithful instead.
        """
        if mode is LeafMode.IMPROVE and not suggestions:
            return impl
        land = self.landscape(impl.dataset_id)
        lineage = impl.lineage + (f"{mode.value[0]}{agent.value}{salt}",)
        rng = rng_for(self.seed, impl.dataset_id, "modify", *lineage)

        states = dict(impl.modules)
        effects = list(impl.effects)
        for s in suggestions:
            if s.category is SuggestionCategory.PROPOSAL_GAP:
                if s.target in states and states[s.target] != "substitute":
                    states[s.target] = "faithful"
                continue
            if mode is LeafMode.IMPROVE:
                dist = land.effect(s.category)
                effects.append(float(rng.normal(dist.mean, dist.spread)) if dist.spread > 0 else dist.mean)

        if mode is LeafMode.REPAIR:
            defect, depth = None, impl.improve_depth
        else:
            defect, depth = impl.defect or self._draw_defect(rng, land), impl.improve_depth + 1
        return replace(
            impl,
            lineage=lineage,
            modules=tuple((name, states[name]) for name, _ in impl.modules),
            effects=tuple(effects),
            improve_depth=depth,
            defect=defect,
        )

    def ablate(self, impl: SimImplementation, module: str) -> SimImplementation:
        """Replace one module with a minimal substitute that contributes nothing."""
        states = dict(impl.modules)
        if module not in states:
            raise ValueError(f"Implementation has no module {module!r}")
        return replace(
            impl,
            lineage=impl.lineage + (f"ablate:{module}",),
            modules=tuple((name, "substitute" if name == module else state) for name, state in impl.modules),
            defect=None,
        )

    def gain(self, impl: SimImplementation) -> float:
        """Transferable improvement of an implementation over its proposal's base quality."""
        proposal = self.landscape(impl.dataset_id).proposal(impl.proposal_id)
        return impl.inherited + sum(impl.effects) + proposal.drift * impl.improve_depth

    def latent_dice(self, impl: SimImplementation) -> float:
        proposal = self.landscape(impl.dataset_id).proposal(impl.proposal_id)
        states = dict(impl.modules)
        modules = sum(m.effect for m in proposal.modules if states.get(m.name) == "faithful")
        return clamp(proposal.theta + self.gain(impl) + modules, 0.0, 1.0)

    # Training and evaluation ---------------------------------------------

    def verify_one_epoch(self, impl: SimImplementation) -> bool:
        """A latent defect is caught with probability q_catch; a clean implementation always passes."""
        if impl.defect is None:
            return True
        land = self.landscape(impl.dataset_id)
        return float(rng_for(self.seed, impl.dataset_id, "verify", *impl.lineage).random()) >= land.q_catch

    def training_network(
        self, dataset_id: str, configuration: str, impl: SimImplementation, plans: Plans
    ) -> Union[TrainOutput, ErrorInfo]:
        land = self.landscape(dataset_id)
        if plans.dataset_id != dataset_id:
            raise ValueError("plans belong to another dataset")
        if impl.defect is not None:
            return ErrorInfo(impl.defect, f"{impl.defect.value} failure in trainer at {impl.path}")
        rng = rng_for(self.seed, dataset_id, "train", configuration, *impl.lineage)
        if float(rng.random()) < land.p_err:
            error_class = TRAINING_ERRORS[int(rng.integers(0, len(TRAINING_ERRORS)))]
            return ErrorInfo(error_class, f"{error_class.value} failure during training at {impl.path}")

        self._issued += 1
        ref = f"{dataset_id}:{self._issued}"
        self._pending[ref] = (dataset_id, impl, configuration)
        return TrainOutput(result_ref=ref, log=self._training_log(rng, self.latent_dice(impl)))

    def evaluate(self, dataset_id: str, result_ref: str) -> EvalMetrics:
        entry = self._pending.pop(result_ref, None)
        if entry is None or entry[0] != dataset_id:
            raise ResultConsumedError(f"Result {result_ref!r} was already evaluated or never issued")
        _, impl, configuration = entry
        land = self.landscape(dataset_id)
        rng = rng_for(self.seed, dataset_id, "evaluate", configuration, *impl.lineage)
        noise = float(rng.normal(0.0, land.noise)) if land.noise > 0 else 0.0
        dice = clamp(self.latent_dice(impl) + noise, 0.0, 1.0)
        eta = float(rng.uniform(-HD95_JITTER, HD95_JITTER))
        hd95 = land.h0 * (1.0 - dice) * (1.0 + eta)
        return EvalMetrics(dice=dice, hd95=hd95, per_case=self._per_case(rng, dice, land.per_case_count))

    # ------------------------------------------------------------------------

    def _draw_defect(self, rng: np.random.Generator, land: LandscapeConfig) -> Optional[ErrorClass]:
        if land.defect_rate <= 0 or float(rng.random()) >= land.defect_rate:
            return None
        return TRAINING_ERRORS[int(rng.integers(0, len(TRAINING_ERRORS)))]

    @staticmethod
    def _per_case(rng: np.random.Generator, dice: float, count: int) -> Tuple[float, ...]:
        samples = np.clip(rng.normal(dice, PER_CASE_SPREAD, size=count), 0.0, 1.0)
        return tuple(round(float(v), 6) for v in samples)

    @staticmethod
    def _training_log(rng: np.random.Generator, dice: float) -> str:
        lines = []
        for epoch in range(1, LOG_EPOCHS + 1):
            progress = epoch / LOG_EPOCHS
            loss = 1.0 - 0.8 * progress + float(rng.normal(0.0, 0.01))
            val = dice * (0.6 + 0.4 * progress)
            lines.append(f"epoch {epoch} train_loss={loss:.4f} val_dice={val:.4f} lr={1e-3 * (1 - progress):.2e}")
        return "\n".join(lines)
