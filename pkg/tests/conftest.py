import numpy as np
import pytest

from udalm.config import (AugmentConfig, CurriculumConfig, ExperimentConfig,
                          LossWeights, ModelConfig, OptimizerConfig)

_acceptance_results = []


def record_acceptance(number, description, passed, detail=""):
    """Collect one acceptance-criterion verdict for the terminal summary."""
    _acceptance_results.append((number, description, bool(passed), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, passed, detail in sorted(_acceptance_results):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number}: {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def desk_config(seed=0, num_landmarks=6, size=64, epochs=30, lambda_domain=0.01,
                dal=True, selection="dynamic", batch_size=16):
    """Small CPU-trainable profile used across the test suite."""
    return ExperimentConfig(
        model=ModelConfig(num_landmarks=num_landmarks, embed_dim=32,
                          num_decoder_layers=2, stride=4, backbone="tiny",
                          input_size=(size, size)),
        weights=LossWeights(lambda_score=100.0, lambda_offset=2.0,
                            lambda_domain=lambda_domain),
        curriculum=CurriculumConfig(delta=0.2, dal=dal, selection=selection),
        optimizer=OptimizerConfig(lr=3e-3, batch_size=batch_size,
                                  epochs_per_round=epochs,
                                  decay_epochs=((int(epochs * 0.7), int(epochs * 0.87))
                                                if epochs >= 10 else ()),
                                  decay_factor=0.1),
        augment=AugmentConfig(scale=0.08, translate=0.04, rotate=8.0,
                              occlusion_count=1, occlusion_size=0.08,
                              blur_prob=0.2),
        heatmap_sigma=1.0,
        seed=seed,
    )


def no_augment(cfg):
    cfg.augment = AugmentConfig(scale=0, translate=0, rotate=0,
                                occlusion_count=0, occlusion_size=0,
                                blur_prob=0)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
