"""Iterative sign-gradient attacks under an L-infinity budget.

Modes
-----
``clsA-zsl``   ascend SCE over the unseen classes (seen-class samples use the seen set)
``clsA-gzsl``  ascend SCE over all classes
``CBEA``       ascend mean seen-class cosine minus mean unseen-class cosine
``NCPconA``    ascend MSE between clean and current concept predictions
``CPconA``     as NCPconA, rejecting any step that changes the predicted class

Every iterate is projected into the epsilon-ball around the clean image and
then into the pixel range. Each sample draws its random start from its own
stream ``(seed, sample_index)``, so results do not depend on batching.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .model import LabelError, SemanticSpace, ZslModel, forward, sce_loss

MODES = ("clsA-zsl", "clsA-gzsl", "CBEA", "NCPconA", "CPconA")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None
    seed: int = 0
    pixel_bounds: tuple[float, float] = (0.0, 1.0)
    cpcona_policy: str = "halve"
    min_step_fraction: float = 1 / 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}; expected one of {MODES}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if not 0 < self.alpha <= self.epsilon * (1 + 1e-12):
            raise ConfigError("step size must lie in (0, epsilon]")
        if self.cpcona_policy != "halve":
            raise ConfigError(f"unknown CPconA policy {self.cpcona_policy!r}")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.steps if self.step_size is None else self.step_size

    @property
    def tag(self) -> str:
        return f"{self.mode}-T{self.steps}-eps{self.epsilon * 255:g}"


@dataclass
class StepRecord:
    step: int
    loss: float
    linf: float
    pred: int
    concept_mse: float
    accepted: bool = True


@dataclass
class PerturbationTrace:
    mode: str
    initial_loss: float
    clean_pred: int
    records: list[StepRecord] = field(default_factory=list)
    predictor: str = ""
    note: str = ""

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else self.initial_loss

    @property
    def accepted_steps(self) -> int:
        return sum(r.accepted for r in self.records)

    def to_records(self, sample: int) -> list[dict]:
        base = {"sample": sample, "mode": self.mode, "predictor": self.predictor}
        return [{**base, **asdict(r)} for r in self.records]


# ------------------------------------------------------------------ primitives

def clip_linf(x_star, x, epsilon: float, bounds: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    x_star, x = np.asarray(x_star, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if x_star.shape != x.shape:
        raise ad.DimensionError(f"clip_linf: shapes {x_star.shape} and {x.shape} differ")
    out = np.clip(x_star, x - epsilon, x + epsilon)
    return np.clip(out, bounds[0], bounds[1])


def init_perturbation(x, epsilon: float, rng: np.random.Generator, bounds=(0.0, 1.0)) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    delta = rng.uniform(-epsilon, epsilon, size=x.shape)
    return np.clip(x + delta, bounds[0], bounds[1])


def cb_loss(s_hat, space: SemanticSpace) -> Tensor:
    """Mean cosine to seen prototypes minus mean cosine to unseen prototypes."""
    if space.seen_ids.size == 0 or space.unseen_ids.size == 0:
        raise ContractError("class-bias loss needs both seen and unseen classes")
    w = np.zeros(space.n_classes)
    w[space.seen_ids] = 1.0 / space.seen_ids.size
    w[space.unseen_ids] = -1.0 / space.unseen_ids.size
    return ad.sum(ad.mul(ad.cosine_matrix(s_hat, space.prototypes), w))


def _class_set(mode: str, y: int, space: SemanticSpace) -> list[int]:
    if mode == "clsA-gzsl":
        return sorted(np.concatenate([space.seen_ids, space.unseen_ids]).tolist())
    if space.is_seen(y):
        return sorted(space.seen_ids.tolist())
    return sorted(space.unseen_ids.tolist())


def _objective(model, x_star, mode, y, space, s_clean):
    """Attack loss at ``x_star`` and its gradient with respect to the image."""
    img = Tensor(x_star, requires_grad=True)
    s_hat = forward(model, img).s_hat
    if mode in ("clsA-zsl", "clsA-gzsl"):
        loss = sce_loss(s_hat, y, _class_set(mode, y, space), space, model.tau)
    elif mode == "CBEA":
        loss = cb_loss(s_hat, space)
    else:
        loss = ad.mse(s_clean, s_hat)
    ad.backward(loss)
    grad = img.grad if img.grad is not None else np.zeros_like(x_star)
    return loss.item(), grad, s_hat.data


def attack_loss(model: ZslModel, x_star, mode: str, y: int, space: SemanticSpace, s_clean=None) -> float:
    if mode in ("NCPconA", "CPconA") and s_clean is None:
        raise ContractError("concept attacks need the clean concept prediction")
    return _objective(model, np.asarray(x_star, dtype=np.float64), mode, y, space, s_clean)[0]


class ClassPredictor:
    """Class decision used for the class-preservation constraint and traces.

    Unseen-class samples use the unseen-only rule; seen-class samples use the
    calibrated rule at ``gamma``.
    """

    def __init__(self, space: SemanticSpace, gamma: float = 0.0):
        self.space = space
        self.gamma = float(gamma)
        self._unseen = np.sort(space.unseen_ids)
        self._seen_mask = space.seen_mask()

    def zsl(self, s_hat: np.ndarray) -> int:
        cos = ad.cosine_matrix(np.atleast_2d(s_hat), self.space.prototypes).data[0]
        return int(self._unseen[np.argmax(cos[self._unseen])])

    def decisions(self, s_hat: np.ndarray, y: int) -> tuple[int, int]:
        """The unseen-only decision and the decision reported for ``y``."""
        return self.zsl(s_hat), self(s_hat, y)

    def kind(self, y: int) -> str:
        return f"gzsl@{self.gamma:g}" if self.space.is_seen(y) else "zsl"

    def __call__(self, s_hat: np.ndarray, y: int) -> int:
        cos = ad.cosine_matrix(np.atleast_2d(s_hat), self.space.prototypes).data[0]
        if self.space.is_seen(y):
            return int(np.argmax(cos - self.gamma * self._seen_mask))
        return int(self._unseen[np.argmax(cos[self._unseen])])


def _step(x_t, grad, alpha, x, cfg: AttackConfig) -> np.ndarray:
    return clip_linf(x_t + alpha * ad.sign(grad), x, cfg.epsilon, cfg.pixel_bounds)


def clsa_step(model, x_t, y, class_set, alpha, space, x=None, epsilon=None) -> np.ndarray:
    """One sign-gradient ascent step on SCE over ``class_set``.

    With ``x`` and ``epsilon`` given the result is projected onto the budget.
    """
    if int(y) not in [int(c) for c in class_set]:
        raise LabelError(f"label {y} not in class set")
    img = Tensor(x_t, requires_grad=True)
    ad.backward(sce_loss(forward(model, img).s_hat, y, class_set, space, model.tau))
    out = np.asarray(x_t) + alpha * ad.sign(img.grad)
    return out if x is None else clip_linf(out, x, epsilon)


def cbea_step(model, x_t, space, alpha, x=None, epsilon=None) -> np.ndarray:
    img = Tensor(x_t, requires_grad=True)
    ad.backward(cb_loss(forward(model, img).s_hat, space))
    grad = img.grad if img.grad is not None else np.zeros_like(np.asarray(x_t))
    out = np.asarray(x_t) + alpha * ad.sign(grad)
    return out if x is None else clip_linf(out, x, epsilon)


def ncpcona_step(model, x_t, s_hat_clean, alpha, x=None, epsilon=None) -> np.ndarray:
    img = Tensor(x_t, requires_grad=True)
    ad.backward(ad.mse(s_hat_clean, forward(model, img).s_hat))
    grad = img.grad if img.grad is not None else np.zeros_like(np.asarray(x_t))
    out = np.asarray(x_t) + alpha * ad.sign(grad)
    return out if x is None else clip_linf(out, x, epsilon)


# ---------------------------------------------------------------- orchestration

def _concept_mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def cpcona_run(model, x, y, space, config: AttackConfig, gamma: float = 0.0, stream: int = 0):
    """Concept attack that never leaves the clean image's predicted class.

    Both the unseen-only decision and the decision used for ``y`` (calibrated
    for seen-class samples) must stay fixed. A step that flips the prediction is reverted and the working step size
    halved; the run stops once the working step drops below
    ``alpha * min_step_fraction``.
    """
    if config.mode != "CPconA":
        raise ConfigError("cpcona_run requires mode CPconA")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([config.seed, stream])
    predict = ClassPredictor(space, gamma)
    s_clean = forward(model, x).s_hat.data
    d0 = predict.decisions(s_clean, y)
    c0 = d0[1]

    x_t = init_perturbation(x, config.epsilon, rng, config.pixel_bounds)
    loss, grad, s_t = _objective(model, x_t, "CPconA", y, space, s_clean)
    note = ""
    if predict.decisions(s_t, y) != d0:
        x_t = x.copy()
        loss, grad, s_t = _objective(model, x_t, "CPconA", y, space, s_clean)
        note = "random start changed the class; restarted from the clean image"
    trace = PerturbationTrace("CPconA", loss, c0, predictor=predict.kind(y), note=note)

    work = config.alpha
    floor = config.alpha * config.min_step_fraction
    for t in range(config.steps):
        if work < floor:
            break
        cand = _step(x_t, grad, work, x, config)
        c_loss, c_grad, c_s = _objective(model, cand, "CPconA", y, space, s_clean)
        accepted = predict.decisions(c_s, y) == d0
        if accepted:
            x_t, loss, grad, s_t = cand, c_loss, c_grad, c_s
        else:
            work /= 2.0
        trace.records.append(
            StepRecord(t, loss, float(np.max(np.abs(x_t - x))), c0 if accepted else predict(s_t, y),
                       _concept_mse(s_t, s_clean), accepted)
        )
    return x_t, trace


def run_attack(
    model: ZslModel,
    x,
    y: int,
    space: SemanticSpace,
    config: AttackConfig,
    gamma: float = 0.0,
    stream: int = 0,
) -> tuple[np.ndarray, PerturbationTrace]:
    """Attack one image; returns the adversarial image and its per-step trace."""
    if not isinstance(config, AttackConfig):
        raise ConfigError("config must be an AttackConfig")
    if config.mode == "CPconA":
        return cpcona_run(model, x, y, space, config, gamma, stream)
    x = np.asarray(x, dtype=np.float64)
    lo, hi = config.pixel_bounds
    if x.min() < lo or x.max() > hi:
        raise ContractError("clean image lies outside the pixel bounds")
    rng = np.random.default_rng([config.seed, stream])
    predict = ClassPredictor(space, gamma)
    s_clean = forward(model, x).s_hat.data
    x_t = init_perturbation(x, config.epsilon, rng, config.pixel_bounds)
    loss, grad, s_t = _objective(model, x_t, config.mode, y, space, s_clean)
    trace = PerturbationTrace(config.mode, loss, predict(s_clean, y), predictor=predict.kind(y))
    for t in range(config.steps):
        x_t = _step(x_t, grad, config.alpha, x, config)
        loss, grad, s_t = _objective(model, x_t, config.mode, y, space, s_clean)
        trace.records.append(
            StepRecord(t, loss, float(np.max(np.abs(x_t - x))), predict(s_t, y), _concept_mse(s_t, s_clean))
        )
    return x_t, trace


def attack_batch(
    model: ZslModel,
    images: np.ndarray,
    labels: np.ndarray,
    space: SemanticSpace,
    config: AttackConfig,
    gamma: float = 0.0,
    workers: int = 1,
) -> tuple[np.ndarray, list[PerturbationTrace]]:
    """Attack every sample independently; sample ``i`` uses random stream ``i``."""

    def one(i):
        return run_attack(model, images[i], int(labels[i]), space, config, gamma, stream=i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(labels))))
    else:
        results = [one(i) for i in range(len(labels))]
    adv = np.stack([r[0] for r in results]) if results else np.empty_like(images)
    return adv, [r[1] for r in results]


def budget_ok(x_adv, x, epsilon: float, bounds=(0.0, 1.0), tol: float = 1e-12) -> bool:
    x_adv, x = np.asarray(x_adv), np.asarray(x)
    return bool(
        np.all(np.abs(x_adv - x) <= epsilon + tol)
        and np.all(x_adv >= bounds[0])
        and np.all(x_adv <= bounds[1])
    )


def to_float32_within_budget(x_adv, x, epsilon: float, bounds=(0.0, 1.0)) -> np.ndarray:
    """Round to float32 while keeping every pixel inside the budget around ``x``.

    ``x`` must already be float32-representable.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.asarray(x_adv, dtype=np.float32)
    toward = np.asarray(x, dtype=np.float32)
    for _ in range(4):
        over = (np.abs(out.astype(np.float64) - x) > epsilon) | (out < bounds[0]) | (out > bounds[1])
        if not over.any():
            break
        out[over] = np.nextafter(out[over], toward[over])
    return out.astype(np.float64)


def ascent_fraction(traces: list[PerturbationTrace]) -> float:
    if not traces:
        return math.nan
    return float(np.mean([tr.final_loss > tr.initial_loss for tr in traces]))
