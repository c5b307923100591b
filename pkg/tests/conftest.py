"""Shared fixtures: small random models for unit tests, the pinned trained
fixture pair for end-to-end suites."""

from pathlib import Path

import numpy as np
import pytest

from tinyquant import corpus as corpus_mod
from tinyquant.checkpoint import load_checkpoint
from tinyquant.explore import PrecisionAssignment
from tinyquant.model import ModelConfig, init_model
from tinyquant.quantized import QuantizedModel, calibrate

FIXTURES_DIR = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(n_blocks=2, d_model=32, n_heads=2, d_ff=64,
                       vocab_size=64, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return init_model(tiny_config, np.random.default_rng(11))


@pytest.fixture(scope="session")
def tiny_seqs(tiny_config):
    rng = np.random.default_rng(12)
    return [rng.integers(0, tiny_config.vocab_size, size=33) for _ in range(6)]


@pytest.fixture(scope="session")
def tiny_calib(tiny_model, tiny_seqs):
    return calibrate(tiny_model, tiny_seqs)


@pytest.fixture(scope="session")
def tiny_qmodel(tiny_model, tiny_calib):
    assignment = PrecisionAssignment.uniform(tiny_model.config, 8)
    return QuantizedModel.build(tiny_model, assignment, tiny_calib)


def _need_fixture(name: str) -> Path:
    path = FIXTURES_DIR / name
    if not path.is_file():
        pytest.fail(
            f"pinned fixture {path} is missing; regenerate with "
            "`tinyquant make-fixture --out-dir fixtures --seed 1234`"
        )
    return path


@pytest.fixture(scope="session")
def fixture_corpus():
    return corpus_mod.load_corpus(_need_fixture("corpus.txt"))


@pytest.fixture(scope="session")
def target_model():
    return load_checkpoint(_need_fixture("target.ckpt"))


@pytest.fixture(scope="session")
def draft_model():
    return load_checkpoint(_need_fixture("draft.ckpt"))


@pytest.fixture(scope="session")
def calibration_seqs(fixture_corpus):
    return corpus_mod.calibration_slice(fixture_corpus)


@pytest.fixture(scope="session")
def validation_seqs(fixture_corpus):
    return corpus_mod.validation_slice(fixture_corpus)


@pytest.fixture(scope="session")
def target_calibration(target_model, calibration_seqs):
    return calibrate(target_model, calibration_seqs)


@pytest.fixture(scope="session")
def target_int8(target_model, target_calibration):
    assignment = PrecisionAssignment.uniform(target_model.config, 8)
    return QuantizedModel.build(target_model, assignment, target_calibration)
