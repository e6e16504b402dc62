import numpy as np
import pytest

from vgpeft.data import SyntheticSpec, generate_synthetic
from vgpeft.model import ModelConfig, build_model, pad_tokens, tokenize
from vgpeft.peft import PeftSpec

# the four standard placements used throughout the sweeps
TABLE_PLACEMENTS = (
    frozenset({"image"}),
    frozenset({"decoder"}),
    frozenset({"image", "decoder"}),
    frozenset({"text", "image", "decoder"}),
)


def spec_for(method, placement, rank=4):
    if method == "lora":
        return PeftSpec.lora(rank=rank, placement=placement)
    if method == "adapter":
        return PeftSpec.adapter(placement=placement)
    return PeftSpec.bitfit(placement=placement)


def random_inputs(config, n, seed=0, length=(3, 9)):
    """Random patch grids and token-id lists of varying length."""
    rng = np.random.default_rng(seed)
    patches = rng.standard_normal((n, config.patch_grid ** 2, config.patch_dim))
    tokens = [list(rng.integers(2, config.vocab_size, size=rng.integers(*length))) for _ in range(n)]
    return patches, tokens


@pytest.fixture
def config():
    return ModelConfig()


@pytest.fixture
def small_config():
    return ModelConfig(d_model=8, n_heads=2, ffn_dim=16, vocab_size=64, patch_grid=4, patch_dim=6)


@pytest.fixture
def model(config):
    return build_model(config)


@pytest.fixture
def small_model(small_config):
    return build_model(small_config)


@pytest.fixture
def inputs(config):
    return random_inputs(config, 6, seed=11)


@pytest.fixture(scope="session")
def synth_train():
    return generate_synthetic(SyntheticSpec(n_samples=64, seed=1))


@pytest.fixture(scope="session")
def synth_test():
    return generate_synthetic(SyntheticSpec(n_samples=32, seed=2))


@pytest.fixture
def small_batch(small_config):
    """A 3-sample batch (patches, ids, mask, targets) for the small model."""
    rng = np.random.default_rng(5)
    patches = rng.standard_normal((3, small_config.patch_grid ** 2, small_config.patch_dim))
    ids, mask = pad_tokens([tokenize("the ship on the left", 64),
                            tokenize("the vehicle on the top", 64),
                            tokenize("the harbor on the middle", 64)])
    targets = np.array([[0.2, 0.5, 0.25, 0.25], [0.6, 0.1, 0.25, 0.25], [0.5, 0.4, 0.25, 0.25]])
    return patches, ids, mask, targets


# acceptance verdict lines, echoed once more at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
