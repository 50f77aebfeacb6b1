"""Attention-based concept embedding classifier and its training losses.

Data flow for one image::

    image --standardize, patchify--> patches [N, patch_dim]
          --backbone--> v_patch [N, d_v]
    v_global   = mean over patches                      [d_v]
    A          = row-softmax(Q K^T / sqrt(d_attn)), Q = v_patch W_q,
                 K = E W_k                              [N, d_s]
    A_col      = A normalized over patches (columns)
    v_specific = A_col^T (v_patch W_v)                 [d_s, d_v]
    v_final    = v_specific + v_global (broadcast)
    s_hat[j]   = <W[j], v_final[j]>                     [d_s]

All functions accept a single image ``[H, W, C]`` or a batch ``[B, H, W, C]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TAU_FLOOR = 1e-3


class LabelError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SemanticSpace:
    prototypes: np.ndarray
    seen_ids: np.ndarray
    unseen_ids: np.ndarray
    concept_names: list[str] | None = None

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.seen_ids = np.asarray(self.seen_ids, dtype=np.int64)
        self.unseen_ids = np.asarray(self.unseen_ids, dtype=np.int64)
        if np.intersect1d(self.seen_ids, self.unseen_ids).size:
            raise ValueError("seen and unseen class sets overlap")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(norms <= 0):
            raise ValueError(f"prototype rows {np.flatnonzero(norms <= 0).tolist()} have zero norm")
        if self.concept_names is not None and len(self.concept_names) != self.n_concepts:
            raise ValueError("concept_names length does not match prototype width")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.prototypes.shape[1]

    def is_seen(self, label: int) -> bool:
        return bool(np.isin(label, self.seen_ids))

    def seen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_classes, dtype=bool)
        mask[self.seen_ids] = True
        return mask


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int]
    n_concepts: int
    patch: int = 4
    d_v: int = 32
    d_e: int = 16
    d_attn: int = 16
    use_relu: bool = False
    tau_init: float = 16.0
    attn_init_scale: float = 1.0


@dataclass
class ZslModel:
    config: ModelConfig
    backbone_weight: np.ndarray
    concept_embed: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    head_weight: np.ndarray
    tau: float
    input_mean: np.ndarray
    input_std: np.ndarray

    # concept_embed stands in for fixed word vectors; input_mean/std are per-channel constants
    TRAINABLE = ("backbone_weight", "w_q", "w_k", "w_v", "head_weight", "tau")
    ARRAYS = ("backbone_weight", "concept_embed", "w_q", "w_k", "w_v", "head_weight", "input_mean", "input_std")

    @property
    def patch_dim(self) -> int:
        return self.config.patch**2 * self.config.image_shape[2]

    def params(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in self.ARRAYS}
        out["tau"] = np.array([self.tau])
        return out

    def copy(self) -> ZslModel:
        return replace(self, **{k: getattr(self, k).copy() for k in self.ARRAYS})


def init_model(config: ModelConfig, rng: np.random.Generator, images: np.ndarray | None = None) -> ZslModel:
    """Random parameters; ``images`` (if given) fix the per-channel input standardization."""
    h, w, c = config.image_shape
    if h % config.patch or w % config.patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {config.patch}")
    patch_dim = config.patch**2 * c

    def gauss(*shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    return ZslModel(
        config=config,
        backbone_weight=gauss(patch_dim, config.d_v, fan_in=patch_dim),
        concept_embed=rng.standard_normal((config.n_concepts, config.d_e)),
        w_q=gauss(config.d_v, config.d_attn, fan_in=config.d_v) * config.attn_init_scale,
        w_k=gauss(config.d_e, config.d_attn, fan_in=config.d_e) * config.attn_init_scale,
        w_v=gauss(config.d_v, config.d_v, fan_in=config.d_v),
        head_weight=gauss(config.n_concepts, config.d_v, fan_in=config.d_v),
        tau=float(config.tau_init),
        input_mean=np.zeros(c) if images is None else images.reshape(-1, c).mean(axis=0),
        input_std=np.ones(c) if images is None else np.maximum(images.reshape(-1, c).std(axis=0), 1e-6),
    )


def patch_index(image_shape: Sequence[int], patch: int) -> np.ndarray:
    """Flat pixel indices laying an ``H x W x C`` image out as raster-ordered patches."""
    h, w, c = image_shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    idx = np.arange(h * w * c).reshape(h // patch, patch, w // patch, patch, c)
    return idx.transpose(0, 2, 1, 3, 4).reshape((h // patch) * (w // patch), patch * patch * c)


def patchify(image, patch: int) -> Tensor:
    image = image if isinstance(image, Tensor) else Tensor(image)
    shape = image.shape[-3:]
    idx = patch_index(shape, patch)
    flat = ad.reshape(image, image.shape[:-3] + (int(np.prod(shape)),))
    return ad.take(flat, (Ellipsis, idx))


def unpatchify(patches: np.ndarray, image_shape: Sequence[int], patch: int) -> np.ndarray:
    idx = patch_index(image_shape, patch)
    patches = np.asarray(patches)
    flat = np.empty(patches.shape[:-2] + (int(np.prod(image_shape)),), dtype=patches.dtype)
    flat[..., idx] = patches
    return flat.reshape(patches.shape[:-2] + tuple(image_shape))


@dataclass
class ForwardOutput:
    s_hat: Tensor
    v_patch: Tensor
    v_final: Tensor
    attention: Tensor


def _param_tensors(model: ZslModel, trainable: bool) -> dict[str, Tensor]:
    out = {}
    for name in model.ARRAYS:
        out[name] = Tensor(getattr(model, name), requires_grad=trainable and name in model.TRAINABLE)
    out["tau"] = Tensor(model.tau, requires_grad=trainable)
    return out


def forward(model: ZslModel, image, params: dict[str, Tensor] | None = None) -> ForwardOutput:
    """Predict the concept vector for an image or batch of images.

    ``params`` overrides the model arrays with graph tensors (used in training);
    by default the parameters enter the graph as constants.
    """
    p = params if params is not None else _param_tensors(model, trainable=False)
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.shape[-3:] != tuple(model.config.image_shape):
        raise ad.DimensionError(
            f"image shape {image.shape[-3:]} does not match model {model.config.image_shape}"
        )
    image = ad.div(ad.sub(image, p["input_mean"]), p["input_std"])
    patches = patchify(image, model.config.patch)
    v_patch = ad.matmul(patches, p["backbone_weight"])
    if model.config.use_relu:
        v_patch = ad.relu(v_patch)
    v_global = ad.mean(v_patch, axis=-2, keepdims=True)  # [..., 1, d_v]

    emb = p["concept_embed"]
    q = ad.matmul(v_patch, p["w_q"])
    k = ad.matmul(emb, p["w_k"])
    logits = ad.scale(ad.matmul(q, ad.swapaxes(k, 0, 1)), 1.0 / math.sqrt(model.config.d_attn))
    attn = ad.softmax(logits, axis=-1)  # [..., N, d_s]
    attn_col = ad.div(attn, ad.sum(attn, axis=-2, keepdims=True))
    values = ad.matmul(v_patch, p["w_v"])
    v_specific = ad.matmul(ad.swapaxes(attn_col, -1, -2), values)  # [..., d_s, d_v]
    v_final = ad.add(v_specific, v_global)
    s_hat = ad.sum(ad.mul(v_final, p["head_weight"]), axis=-1)
    return ForwardOutput(s_hat=s_hat, v_patch=v_patch, v_final=v_final, attention=attn)


def predict_concepts(model: ZslModel, images: np.ndarray) -> np.ndarray:
    return forward(model, images).s_hat.data


# ---------------------------------------------------------------------- losses

def sce_loss(s_hat, y: int, class_set: Sequence[int], space: SemanticSpace, tau) -> Tensor:
    """Cross-entropy over temperature-scaled cosine similarities to ``class_set``."""
    class_set = [int(c) for c in class_set]
    if int(y) not in class_set:
        raise LabelError(f"label {y} not in class set {class_set}")
    cos = ad.cosine_matrix(s_hat, space.prototypes[class_set])
    logits = ad.mul(cos, tau) if isinstance(tau, Tensor) else ad.scale(cos, tau)
    return ad.softmax_log_loss(logits, class_set.index(int(y)))


def sce_loss_batch(s_hat, labels: Sequence[int], class_set: Sequence[int], space: SemanticSpace, tau) -> Tensor:
    """Mean SCE over a batch ``s_hat`` of shape ``[B, d_s]``."""
    class_set = [int(c) for c in class_set]
    pos = {c: i for i, c in enumerate(class_set)}
    try:
        targets = np.array([pos[int(y)] for y in labels])
    except KeyError as exc:
        raise LabelError(f"label {exc.args[0]} not in class set") from None
    cos = ad.cosine_matrix(s_hat, space.prototypes[class_set])
    logits = ad.mul(cos, tau) if isinstance(tau, Tensor) else ad.scale(cos, tau)
    picked = ad.take(logits, (np.arange(len(targets)), targets))
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=-1), picked))


@dataclass
class RemseState:
    alpha_re: float = 1.0
    beta_re: float = 1.0
    m_prime: np.ndarray | None = field(default=None, repr=False)
    classes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha_re < 0 or self.beta_re < 0:
            raise ValueError("re-weighting exponents must be non-negative")


def remse_weights(m_prime: np.ndarray, alpha_re: float, beta_re: float) -> tuple[np.ndarray, np.ndarray]:
    """Semantic-level (p) and class-level (q) re-weights from class-averaged errors."""
    m = np.maximum(m_prime, 1e-12)
    p = (np.log(m / m.min(axis=1, keepdims=True)) + 1.0) ** beta_re
    q = (np.log(m / m.min(axis=0, keepdims=True)) + 1.0) ** alpha_re
    return p, q


def remse_loss(s_hat_batch, y_batch: Sequence[int], space: SemanticSpace, state: RemseState) -> Tensor:
    """Re-balanced squared error between normalized predictions and prototypes.

    The re-weights are recomputed from the current batch and held constant.
    """
    y_batch = np.asarray(y_batch, dtype=np.int64)
    if y_batch.size == 0:
        raise ad.ContractError("remse_loss needs a non-empty batch")
    if not np.all(np.isin(y_batch, space.seen_ids)):
        raise LabelError("remse_loss only accepts seen-class labels")
    pred = ad.l2_normalize(s_hat_batch, axis=-1)
    proto = space.prototypes / np.linalg.norm(space.prototypes, axis=1, keepdims=True)
    target = proto[y_batch]
    diff = ad.sub(pred, target)
    sq = ad.mul(diff, diff)

    classes, inverse = np.unique(y_batch, return_inverse=True)
    abs_err = np.abs(pred.data - target)
    m_prime = np.zeros((classes.size, space.n_concepts))
    np.add.at(m_prime, inverse, abs_err)
    m_prime /= np.bincount(inverse)[:, None]
    p, q = remse_weights(m_prime, state.alpha_re, state.beta_re)
    state.m_prime, state.classes = m_prime, classes

    weights = (p * q)[inverse]
    return ad.scale(ad.sum(ad.mul(sq, weights)), 1.0 / y_batch.size)


# -------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.05
    batch_size: int = 32
    lam: float = 1.0
    alpha_re: float = 1.0
    beta_re: float = 1.0
    weight_decay: float = 0.0


@dataclass
class EpochLoss:
    epoch: int
    sce: float
    remse: float
    total: float


def train(
    model: ZslModel,
    images: np.ndarray,
    labels: np.ndarray,
    space: SemanticSpace,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[ZslModel, list[EpochLoss]]:
    """Mini-batch gradient descent on SCE + lam * ReMSE over seen classes.

    Returns a new model; ``model`` itself is not modified.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isin(labels, space.seen_ids)):
        bad = sorted(set(labels.tolist()) - set(space.seen_ids.tolist()))
        raise DatasetError(f"training set contains non-seen classes {bad}")
    model = model.copy()
    seen = space.seen_ids.tolist()
    state = RemseState(alpha_re=config.alpha_re, beta_re=config.beta_re)
    trace: list[EpochLoss] = []
    n = len(labels)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            params = _param_tensors(model, trainable=True)
            s_hat = forward(model, images[idx], params).s_hat
            l_sce = sce_loss_batch(s_hat, labels[idx], seen, space, params["tau"])
            l_re = remse_loss(s_hat, labels[idx], space, state)
            total = ad.add(l_sce, ad.scale(l_re, config.lam)) if config.lam else l_sce
            if not np.isfinite(total.item()):
                raise ad.NumericError(f"non-finite training loss in epoch {epoch}; lower the learning rate")
            ad.backward(total)
            for name in model.TRAINABLE:
                grad = params[name].grad
                if grad is None:
                    continue
                if name == "tau":
                    model.tau = max(model.tau - config.lr * float(grad), TAU_FLOOR)
                else:
                    value = getattr(model, name)
                    if config.weight_decay:
                        grad = grad + config.weight_decay * value
                    setattr(model, name, value - config.lr * grad)
            w = len(idx) / n
            sums += w * np.array([l_sce.item(), l_re.item(), total.item()])
        trace.append(EpochLoss(epoch, *map(float, sums)))
    return model, trace


def seen_accuracy(model: ZslModel, images: np.ndarray, labels: np.ndarray, space: SemanticSpace) -> float:
    """Fraction of samples whose closest seen prototype is the true class."""
    s = predict_concepts(model, images)
    cos = ad.cosine_matrix(s, space.prototypes[space.seen_ids]).data
    pred = space.seen_ids[np.argmax(cos, axis=1)]
    return float(np.mean(pred == labels))
