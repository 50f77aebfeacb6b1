"""ZSL / calibrated GZSL prediction and evaluation metrics.

Accuracies are per-class means expressed in percent. Ties in any argmax go to
the smallest class id (or smallest gamma).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError, cosine_matrix
from .model import LabelError, SemanticSpace

SENTINEL = 1e6


@dataclass(frozen=True)
class CurvePoint:
    gamma: float
    U: float
    S: float
    H: float


@dataclass
class GammaCurve:
    points: list[CurvePoint]

    def __post_init__(self):
        gammas = [p.gamma for p in self.points]
        if any(b <= a for a, b in zip(gammas, gammas[1:])):
            raise ValueError("gamma values must be strictly increasing")

    def __len__(self):
        return len(self.points)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([p.gamma for p in self.points])

    @property
    def U(self) -> np.ndarray:
        return np.array([p.U for p in self.points])

    @property
    def S(self) -> np.ndarray:
        return np.array([p.S for p in self.points])

    @property
    def H(self) -> np.ndarray:
        return np.array([p.H for p in self.points])

    def at(self, gamma: float) -> CurvePoint:
        idx = np.flatnonzero(self.gammas == gamma)
        if idx.size == 0:
            raise KeyError(f"gamma {gamma} is not on the curve")
        return self.points[int(idx[0])]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("gamma,U,S,H\n")
            for p in self.points:
                fh.write(f"{p.gamma:.6f},{p.U:.6f},{p.S:.6f},{p.H:.6f}\n")

    @classmethod
    def from_csv(cls, path) -> GammaCurve:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([CurvePoint(*(float(r[k]) for k in ("gamma", "U", "S", "H"))) for r in rows])


def default_grid(lo: float = -1.5, hi: float = 1.5, n: int = 201, sentinels: bool = True) -> np.ndarray:
    grid = np.linspace(lo, hi, n)
    if sentinels:
        grid = np.concatenate([[-SENTINEL], grid, [SENTINEL]])
    return grid


def class_scores(s_hat: np.ndarray, space: SemanticSpace) -> np.ndarray:
    """Cosine similarity of each predicted concept vector to every class prototype."""
    return cosine_matrix(np.atleast_2d(s_hat), space.prototypes).data


def zsl_predict(s_hat, space: SemanticSpace):
    """Closest unseen class by cosine. Accepts one vector or a batch."""
    if space.unseen_ids.size == 0:
        raise ContractError("zsl_predict needs at least one unseen class")
    single = np.ndim(s_hat) == 1
    scores = class_scores(s_hat, space)
    return _zsl_from_scores(scores, space)[0] if single else _zsl_from_scores(scores, space)


def _zsl_from_scores(scores: np.ndarray, space: SemanticSpace) -> np.ndarray:
    unseen = np.sort(space.unseen_ids)
    return unseen[np.argmax(scores[:, unseen], axis=1)]


def _gzsl_from_scores(scores: np.ndarray, space: SemanticSpace, gamma: float) -> np.ndarray:
    calibrated = scores - gamma * space.seen_mask()[None, :]
    return np.argmax(calibrated, axis=1)


def gzsl_predict(s_hat, space: SemanticSpace, gamma: float):
    if space.unseen_ids.size == 0 or space.seen_ids.size == 0:
        raise ContractError("gzsl_predict needs both seen and unseen classes")
    single = np.ndim(s_hat) == 1
    pred = _gzsl_from_scores(class_scores(s_hat, space), space, gamma)
    return pred[0] if single else pred


def harmonic_mean(u: float, s: float) -> float:
    if u < 0 or s < 0:
        raise ContractError("accuracies must be non-negative")
    return 0.0 if u + s == 0 else 2.0 * u * s / (u + s)


def per_class_top1(preds, labels, class_subset) -> float:
    """Mean over ``class_subset`` of per-class accuracy, in percent."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    class_subset = np.asarray(class_subset)
    if class_subset.size == 0:
        raise ContractError("class subset is empty")
    accs = []
    for c in class_subset:
        mask = labels == c
        if not mask.any():
            raise ContractError(f"class {int(c)} has no samples")
        accs.append(np.mean(preds[mask] == c))
    return 100.0 * float(np.mean(accs))


def gamma_sweep(scores: np.ndarray, labels, space: SemanticSpace, grid: Sequence[float]) -> GammaCurve:
    """U/S/H for each calibration value in ``grid`` from one score matrix."""
    grid = np.asarray(grid, dtype=np.float64)
    labels = np.asarray(labels)
    if grid.size == 0:
        raise ContractError("gamma grid is empty")
    if np.any(~np.isin(labels, np.arange(space.n_classes))):
        raise LabelError("labels outside the semantic space")
    seen_mask = np.isin(labels, space.seen_ids)
    seen_cls = np.unique(labels[seen_mask])
    unseen_cls = np.unique(labels[~seen_mask])
    points = []
    for g in grid:
        pred = _gzsl_from_scores(scores, space, float(g))
        u = per_class_top1(pred[~seen_mask], labels[~seen_mask], unseen_cls) if unseen_cls.size else 0.0
        s = per_class_top1(pred[seen_mask], labels[seen_mask], seen_cls) if seen_cls.size else 0.0
        points.append(CurvePoint(float(g), u, s, harmonic_mean(u, s)))
    return GammaCurve(points)


def best_gamma(curve: GammaCurve) -> CurvePoint:
    if not len(curve):
        raise ContractError("empty curve")
    return curve.points[int(np.argmax(curve.H))]


def ausuc_area(s_values, u_values) -> float:
    """Trapezoidal area under the U-versus-S trace (same units as the inputs squared)."""
    s_values = np.asarray(s_values, dtype=np.float64)
    u_values = np.asarray(u_values, dtype=np.float64)
    if s_values.size < 2:
        raise ContractError("AUSUC needs at least two curve points")
    uniq = np.unique(s_values)
    u_max = np.array([u_values[s_values == s].max() for s in uniq])
    return float(np.sum(np.diff(uniq) * (u_max[1:] + u_max[:-1]) / 2.0))


def ausuc(curve: GammaCurve) -> float:
    """Area under the seen-unseen curve of a percent-valued sweep, in percent."""
    return ausuc_area(curve.S, curve.U) / 100.0


def concept_mse(s_hat_batch, space: SemanticSpace, labels) -> tuple[float | None, float | None]:
    """Raw mean squared error of normalized predictions vs. normalized prototypes,
    split by whether the true class is unseen or seen. A side with no samples is ``None``."""
    s = np.atleast_2d(np.asarray(s_hat_batch, dtype=np.float64))
    labels = np.asarray(labels)
    pred = s / np.linalg.norm(s, axis=1, keepdims=True)
    proto = space.prototypes / np.linalg.norm(space.prototypes, axis=1, keepdims=True)
    per_sample = np.mean((pred - proto[labels]) ** 2, axis=1)
    seen = np.isin(labels, space.seen_ids)
    mse_u = float(np.mean(per_sample[~seen])) if np.any(~seen) else None
    mse_s = float(np.mean(per_sample[seen])) if np.any(seen) else None
    return mse_u, mse_s


@dataclass
class EvalReport:
    t1_zsl: float
    gamma_star: float
    u_at_gamma: float
    s_at_gamma: float
    h_at_gamma: float
    best_gamma: float
    u_best: float
    s_best: float
    h_best: float
    ausuc: float
    mse_u: float | None  # x1e-2 units
    mse_s: float | None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def evaluate(
    s_hat: np.ndarray,
    labels: np.ndarray,
    space: SemanticSpace,
    grid: Sequence[float],
    gamma_star: float | None = None,
    meta: dict | None = None,
) -> tuple[EvalReport, GammaCurve]:
    """Full metric bundle for predicted concepts of a (possibly attacked) test split.

    ``gamma_star`` is the calibration frozen on clean data; when omitted, the
    best gamma of this sweep is used, so both rows coincide.
    """
    labels = np.asarray(labels)
    scores = class_scores(s_hat, space)
    curve = gamma_sweep(scores, labels, space, grid)
    best = best_gamma(curve)
    if gamma_star is None:
        gamma_star = best.gamma
    pred = _gzsl_from_scores(scores, space, gamma_star)
    seen = np.isin(labels, space.seen_ids)
    u = per_class_top1(pred[~seen], labels[~seen], np.unique(labels[~seen])) if np.any(~seen) else 0.0
    s = per_class_top1(pred[seen], labels[seen], np.unique(labels[seen])) if np.any(seen) else 0.0
    if np.any(~seen):
        zsl = _zsl_from_scores(scores[~seen], space)
        t1 = per_class_top1(zsl, labels[~seen], np.unique(labels[~seen]))
    else:
        t1 = 0.0
    mse_u, mse_s = concept_mse(s_hat, space, labels)
    report = EvalReport(
        t1_zsl=t1,
        gamma_star=float(gamma_star),
        u_at_gamma=u,
        s_at_gamma=s,
        h_at_gamma=harmonic_mean(u, s),
        best_gamma=best.gamma,
        u_best=best.U,
        s_best=best.S,
        h_best=best.H,
        ausuc=ausuc(curve),
        mse_u=None if mse_u is None else 100.0 * mse_u,
        mse_s=None if mse_s is None else 100.0 * mse_s,
        meta=dict(meta or {}),
    )
    return report, curve


def write_curve(curve: GammaCurve, path) -> Path:
    path = Path(path)
    curve.to_csv(path)
    return path
