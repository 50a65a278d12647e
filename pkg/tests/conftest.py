import pytest

from src.pipeline import ExperimentConfig
from src.simulator import LandscapeConfig, ModuleSpec, ProposalLandscape, load_landscape


@pytest.fixture
def winning_landscape():
    """One noise-free proposal whose first implementation already beats the 0.70 baseline."""
    return LandscapeConfig(
        proposals=(
            ProposalLandscape(
                "gated_decoder",
                theta=0.72,
                modules=(ModuleSpec("gate", "faithful", 0.0), ModuleSpec("norm", "faithful", 0.0)),
            ),
        ),
        noise=0.0,
        p_err=0.0,
    )


@pytest.fixture
def make_config():
    def build(landscape, **overrides):
        if isinstance(landscape, str):
            landscape = load_landscape(landscape)
        values = dict(dataset_id="d1", proposal_ids=tuple(landscape.proposal_ids), landscape=landscape)
        values.update(overrides)
        return ExperimentConfig(**values)

    return build
