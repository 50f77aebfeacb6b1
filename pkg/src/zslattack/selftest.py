"""Built-in correctness checks: image gradients of every attack loss and metric oracles."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import metrics
from .attacks import cb_loss
from .autodiff import Tensor
from .model import ModelConfig, SemanticSpace, forward, init_model, sce_loss

GRAD_TOL = 1e-4


def tiny_problem(rng: np.random.Generator, use_relu: bool = False):
    """A random small model, semantic space and image."""
    d_s = int(rng.integers(2, 5))
    config = ModelConfig(
        image_shape=(4, 4, int(rng.integers(1, 3))), n_concepts=d_s, patch=2,
        d_v=int(rng.integers(2, 5)), d_e=3, d_attn=3, use_relu=use_relu,
        tau_init=float(rng.uniform(1, 10)), attn_init_scale=1.0,
    )
    model = init_model(config, rng)
    model.input_mean = rng.uniform(0.3, 0.7, config.image_shape[2])
    model.input_std = rng.uniform(0.2, 0.5, config.image_shape[2])
    n_classes = 4
    space = SemanticSpace(rng.uniform(0.05, 1, (n_classes, d_s)), [0, 1], [2, 3])
    image = rng.uniform(0, 1, config.image_shape)
    return model, space, image


def attack_losses(model, space, s_clean):
    """Scalar builders ``s_hat -> loss`` for each attack objective."""
    return {
        "sce-zsl": lambda s: sce_loss(s, 2, [2, 3], space, model.tau),
        "sce-gzsl": lambda s: sce_loss(s, 0, [0, 1, 2, 3], space, model.tau),
        "class-bias": lambda s: cb_loss(s, space),
        "concept-mse": lambda s: ad.mse(s_clean, s),
    }


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradient_checks(n_models: int = 50, seed: int = 0, h: float = 1e-5) -> list[tuple[str, float]]:
    """Worst relative error of backward vs central differences, per loss, over ``n_models`` models."""
    worst: dict[str, float] = {}
    for i in range(n_models):
        rng = np.random.default_rng([seed, i])
        model, space, image = tiny_problem(rng, use_relu=bool(i % 2))
        s_clean = forward(model, rng.uniform(0, 1, image.shape)).s_hat.data
        for name, loss in attack_losses(model, space, s_clean).items():
            x = Tensor(image, requires_grad=True)
            ad.backward(loss(forward(model, x).s_hat))
            numeric = ad.fd_gradient(lambda z: loss(forward(model, z).s_hat).item(), image.copy(), h)
            worst[name] = max(worst.get(name, 0.0), relative_error(x.grad, numeric))
    return sorted(worst.items())


def metric_oracles() -> list[tuple[str, float, float, float]]:
    """(name, value, expected, tolerance) for the hard-coded metric oracles."""
    hand = metrics.ausuc_area([0.0, 0.5, 0.9], [0.8, 0.5, 0.0])
    return [
        ("H(61.1, 84.8)", metrics.harmonic_mean(61.1, 84.8), 71.0, 0.05),
        ("H(62.5, 45.1)", metrics.harmonic_mean(62.5, 45.1), 52.4, 0.05),
        ("AUSUC hand curve", hand, 0.425, 1e-9),
    ]


def run(n_models: int = 50) -> list[tuple[str, bool, str]]:
    results = []
    for name, err in gradient_checks(n_models):
        results.append((f"grad {name}", err <= GRAD_TOL, f"max rel err {err:.2e} over {n_models} models"))
    for name, value, expected, tol in metric_oracles():
        results.append((name, abs(value - expected) <= tol, f"{value:.6f} (expected {expected} +/- {tol:g})"))
    return results
