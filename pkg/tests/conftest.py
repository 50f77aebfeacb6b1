import json
from pathlib import Path

import numpy as np
import pytest

from zslattack.model import ModelConfig, SemanticSpace, ZslModel, init_model

GOLDEN = Path(__file__).parent / "golden"

# (criterion, passed, detail) lines filled by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def golden():
    """The hand-computed tiny model and its expected forward pass."""
    g = json.loads((GOLDEN / "tiny_forward.json").read_text())
    config = ModelConfig(image_shape=(2, 2, 1), n_concepts=2, patch=2, d_v=2, d_e=2, d_attn=2)
    model = init_model(config, np.random.default_rng(0))
    model.backbone_weight = np.array(g["backbone_weight"], dtype=float)
    model.w_v = np.array(g["w_v"], dtype=float)
    model.head_weight = np.array(g["head_weight"], dtype=float)
    model.tau = 10.0
    return model, g


@pytest.fixture
def golden_space():
    return SemanticSpace(np.array([[1.0, 0.0], [0.0, 1.0], [0.8, -0.6], [0.6, 0.8]]), [0, 1], [2, 3])


def tiny_model(seed=0, side=4, channels=1, d_s=3, use_relu=False) -> ZslModel:
    config = ModelConfig(
        image_shape=(side, side, channels), n_concepts=d_s, patch=2, d_v=4, d_e=3, d_attn=3,
        use_relu=use_relu, tau_init=5.0, attn_init_scale=1.0,
    )
    return init_model(config, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def trained():
    """The default mini-awa2 dataset with a model trained through the pipeline path."""
    from zslattack import data, experiment, metrics
    from zslattack.model import predict_concepts

    cfg = experiment.ExperimentConfig()
    ds = data.generate(data.preset(cfg.preset, seed=cfg.seed))
    model, _ = experiment.fit(cfg, ds)
    te = ds.test()
    clean, _ = metrics.evaluate(predict_concepts(model, te.images), te.labels, ds.space, cfg.grid())
    return model, ds, te, clean.gamma_star
