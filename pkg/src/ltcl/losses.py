"""Contrastive and self-distillation losses with their analytic oracles.

Candidate convention: for an anchor embedding z, the candidate set is the
augmentation positive z_plus followed by the queue snapshot rows, in queue
order. All similarity logits are dot products divided by the temperature,
and every log-probability is computed through a max-subtracted logsumexp.

The supervised contrastive loss pulls z toward z_plus and all same-class
snapshot entries with equal weight 1/(|P|+1). The decoupled variant keeps
the same denominator but scales the two kinds of positive logits in the
numerator: alpha*(|P|+1) on the augmentation pair and (1-alpha)*(|P|+1)/|P|
on each queue positive, which makes the positive gradient split and the
converged p(z_plus|z) independent of |P|. The patch self-distillation loss
matches the similarity distribution of a re-encoded image patch to the
detached distribution of the corresponding ROI-pooled feature. Weights are
carried as exact rationals so their defining identity holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .errors import ConfigError, ContractError
from .memqueue import Snapshot
from .synth import FULL_BOX, PatchBox

VARIANTS = (
    "scl",
    "dscl",
    "scl+pbsd",
    "dscl+pbsd",
    "dscl+multicrop",
    "dscl+pbsd-global",
)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    alpha: float = 0.1
    lam: float = 1.5
    num_patches: int = 5
    patch_scale: tuple[float, float] = (0.05, 0.6)
    patch_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    crop_size: int = 16
    pbsd_target_source: str = "online"  # or "ema"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"loss weight must be >= 0, got {self.lam}")
        if self.num_patches < 1:
            raise ConfigError(f"need at least one patch, got {self.num_patches}")
        if self.pbsd_target_source not in ("online", "ema"):
            raise ConfigError(f"unknown target source {self.pbsd_target_source!r}")


@dataclass(frozen=True)
class PositiveWeights:
    """Numerator weights of the decoupled loss, exact rationals."""

    w_plus: Fraction
    w_queue: Fraction

    @property
    def w_plus_f(self) -> float:
        return float(self.w_plus)

    @property
    def w_queue_f(self) -> float:
        return float(self.w_queue)


def positive_weights(alpha: float, num_queue_positives: int) -> PositiveWeights:
    """Weights for one augmentation positive and |P| queue positives.

    Computed in exact rational arithmetic so that
    w_plus + |P| * w_queue == |P| + 1 holds exactly for every alpha.
    """
    if num_queue_positives < 1:
        raise ContractError("positive_weights needs at least one queue positive")
    a = Fraction(alpha)
    p = num_queue_positives
    return PositiveWeights(
        w_plus=a * (p + 1),
        w_queue=(1 - a) * (p + 1) / p,
    )


@dataclass(frozen=True)
class SimilarityDistribution:
    """Probabilities over the candidate set [z_plus, queue rows]."""

    probs: np.ndarray
    temperature: float
    detached: bool = True

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def p_plus(self) -> float:
        return float(self.probs[0])


def candidate_matrix(aug_positive: np.ndarray, snapshot: Snapshot) -> np.ndarray:
    zp = np.asarray(aug_positive, dtype=np.float64).reshape(1, -1)
    if len(snapshot) == 0:
        return zp
    return np.concatenate([zp, snapshot.embeddings], axis=0)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def conditional_prob(anchor: np.ndarray, aug_positive: np.ndarray,
                     snapshot: Snapshot, tau: float) -> SimilarityDistribution:
    """Temperature softmax of the anchor against [z_plus, queue rows]."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    z = np.asarray(anchor, dtype=np.float64)
    cands = candidate_matrix(aug_positive, snapshot)
    probs = _stable_softmax(cands @ z / tau)
    return SimilarityDistribution(probs=probs, temperature=tau)


# ---------------------------------------------------------------------------
# batched alignment core


def _logits(z: ad.Tensor, zplus_rows: np.ndarray, snapshot: Snapshot,
            tau: float) -> ad.Tensor:
    """(R, 1+|M|) similarity logits for R anchor rows.

    The temperature is folded into the constant candidate matrices so no
    scaling pass over the full logit block is needed.
    """
    rows = z.shape[0]
    plog = ad.reshape(ad.rowwise_dot(z, np.asarray(zplus_rows) / tau), (rows, 1))
    if len(snapshot) == 0:
        return plog
    qlog = ad.matmul(z, ad.Tensor(snapshot.embeddings.T / tau))
    return ad.concat_cols(plog, qlog)


def contrastive_weight_rows(labels: np.ndarray, snapshot: Snapshot,
                            alpha: float | None) -> np.ndarray:
    """Per-anchor numerator weights, already divided by |P|+1.

    alpha=None selects the equal-weight supervised loss. Anchors whose class
    is absent from the snapshot fall back to the augmentation-only term with
    weight 1.
    """
    rows = len(labels)
    weights = np.zeros((rows, 1 + len(snapshot)))
    for i, label in enumerate(labels):
        pos = snapshot.positives_of(int(label)) if len(snapshot) else np.array([], dtype=int)
        p = len(pos)
        if p == 0:
            weights[i, 0] = 1.0
            continue
        if alpha is None:
            weights[i, 0] = 1.0 / (p + 1)
            weights[i, 1 + pos] = 1.0 / (p + 1)
        else:
            w = positive_weights(alpha, p)
            weights[i, 0] = w.w_plus_f / (p + 1)
            weights[i, 1 + pos] = w.w_queue_f / (p + 1)
    return weights


def alignment_loss(logits: ad.Tensor, weight_rows: np.ndarray,
                   row_weights: np.ndarray | None = None) -> ad.Tensor:
    """Weighted mean over rows of (logsumexp - weighted positive logits).

    row_weights default to the uniform 1/rows; they must sum to 1 when the
    result is to be a proper mean.
    """
    rows = logits.shape[0]
    if row_weights is None:
        row_weights = np.full(rows, 1.0 / rows)
    return ad.add(
        ad.weighted_sum(ad.logsumexp(logits), row_weights),
        ad.scale(ad.weighted_sum(logits, weight_rows * row_weights[:, None]), -1.0),
    )


def contrastive_loss_batch(z: ad.Tensor, zplus_rows: np.ndarray, labels: np.ndarray,
                           snapshot: Snapshot, tau: float,
                           alpha: float | None) -> ad.Tensor:
    logits = _logits(z, zplus_rows, snapshot, tau)
    return alignment_loss(logits, contrastive_weight_rows(labels, snapshot, alpha))


def _anchor_row(anchor) -> ad.Tensor:
    if isinstance(anchor, ad.Tensor):
        return ad.reshape(anchor, (1, anchor.data.size))
    return ad.Tensor(np.asarray(anchor, dtype=np.float64).reshape(1, -1))


def scl_loss(anchor, aug_positive, snapshot: Snapshot, label: int, tau: float) -> ad.Tensor:
    """Supervised contrastive loss for a single anchor."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    z = _anchor_row(anchor)
    zp = np.asarray(aug_positive, dtype=np.float64).reshape(1, -1)
    return contrastive_loss_batch(z, zp, np.array([label]), snapshot, tau, alpha=None)


def dscl_loss(anchor, aug_positive, snapshot: Snapshot, label: int, tau: float,
              alpha: float) -> ad.Tensor:
    """Decoupled supervised contrastive loss for a single anchor."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    z = _anchor_row(anchor)
    zp = np.asarray(aug_positive, dtype=np.float64).reshape(1, -1)
    return contrastive_loss_batch(z, zp, np.array([label]), snapshot, tau, alpha=alpha)


# ---------------------------------------------------------------------------
# analytic gradients and the positive-split ratio


def scl_anchor_gradient_analytic(anchor: np.ndarray, aug_positive: np.ndarray,
                                 snapshot: Snapshot, label: int, tau: float) -> np.ndarray:
    """Partial derivative of the supervised loss w.r.t. the anchor embedding.

    Candidates are treated as constants. With probabilities p over
    [z_plus, queue rows] and target 1/(|P|+1) on the positives:
    (1/tau) * (sum_j p_j z_j - sum_{t in positives} z_t / (|P|+1)).
    """
    dist = conditional_prob(anchor, aug_positive, snapshot, tau)
    cands = candidate_matrix(aug_positive, snapshot)
    pos = snapshot.positives_of(label) if len(snapshot) else np.array([], dtype=int)
    target = np.zeros(len(dist.probs))
    target[0] = 1.0 / (len(pos) + 1)
    if len(pos):
        target[1 + pos] = 1.0 / (len(pos) + 1)
    return (dist.probs - target) @ cands / tau


def positive_gradient_ratio(anchor: np.ndarray, aug_positive: np.ndarray,
                            snapshot: Snapshot, label: int, tau: float,
                            mode: str, alpha: float | None = None) -> float:
    """Norm of the augmentation-positive gradient over the summed norms of
    the queue-positive gradients, using the mode's per-positive terms."""
    pos = snapshot.positives_of(label) if len(snapshot) else np.array([], dtype=int)
    p = len(pos)
    if p == 0:
        raise ContractError("gradient ratio undefined without queue positives")
    if mode == "scl":
        coef_plus = coef_queue = 1.0 / (p + 1)
    elif mode == "dscl":
        if alpha is None:
            raise ConfigError("dscl mode needs alpha")
        coef_plus = alpha
        coef_queue = (1.0 - alpha) / p
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    dist = conditional_prob(anchor, aug_positive, snapshot, tau)
    cands = candidate_matrix(aug_positive, snapshot)
    norms = np.linalg.norm(cands, axis=1)
    num = abs(dist.probs[0] - coef_plus) * norms[0]
    den = (np.abs(dist.probs[1 + pos] - coef_queue) * norms[1 + pos]).sum()
    return float(num / den)


# ---------------------------------------------------------------------------
# patch-based self distillation


def pbsd_target_distribution(c, aug_positive, snapshot: Snapshot,
                             tau: float) -> SimilarityDistribution:
    """Detached similarity distribution of an ROI-pooled patch feature."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    c_data = c.data if isinstance(c, ad.Tensor) else np.asarray(c, dtype=np.float64)
    cands = candidate_matrix(aug_positive, snapshot)
    probs = _stable_softmax(cands @ c_data.reshape(-1) / tau)
    return SimilarityDistribution(probs=probs, temperature=tau, detached=True)


def pbsd_target_rows(c_rows: np.ndarray, zplus_rows: np.ndarray,
                     snapshot: Snapshot, tau: float) -> np.ndarray:
    """Target distributions for a block of detached ROI features (R, d)."""
    plog = np.einsum("rd,rd->r", c_rows, zplus_rows)[:, None]
    if len(snapshot):
        logits = np.concatenate([plog, c_rows @ snapshot.embeddings.T], axis=1) / tau
    else:
        logits = plog / tau
    return _stable_softmax(logits)


def distillation_loss_batch(s: ad.Tensor, zplus_rows: np.ndarray,
                            snapshot: Snapshot, tau: float,
                            targets: np.ndarray) -> ad.Tensor:
    """Mean over patch rows of the cross-entropy against detached targets."""
    logits = _logits(s, zplus_rows, snapshot, tau)
    return alignment_loss(logits, targets)


def pbsd_loss(pt: enc.ParamTensors, image: np.ndarray, boxes: list[PatchBox],
              aug_positive: np.ndarray, snapshot: Snapshot, tau: float,
              crop_size: int = 16,
              target_pt: enc.ParamTensors | None = None) -> ad.Tensor:
    """Patch self-distillation for one anchor image.

    ROI-pooled features of the image's feature map define detached target
    distributions; bilinear patch crops are re-encoded and trained to
    reproduce them. target_pt selects the binding for the target branch
    (defaults to the online one); its outputs never carry gradients.
    """
    if len(boxes) < 1:
        raise ContractError("pbsd needs at least one patch box")
    tgt = target_pt if target_pt is not None else pt
    u, _ = enc.encode(tgt, image[None] if image.ndim == 3 else image)
    c_rows = enc.roi_pool_project(tgt, u, [list(boxes)]).data  # detached values
    zp = np.asarray(aug_positive, dtype=np.float64).reshape(1, -1)
    zp_rows = np.repeat(zp, len(boxes), axis=0)
    targets = pbsd_target_rows(c_rows, zp_rows, snapshot, tau)
    s = enc.embed_patch(pt, image, [list(boxes)], crop_size)
    return distillation_loss_batch(s, zp_rows, snapshot, tau, targets)


def multicrop_loss(pt: enc.ParamTensors, image: np.ndarray, boxes: list[PatchBox],
                   aug_positive: np.ndarray, snapshot: Snapshot, label: int,
                   tau: float, alpha: float, crop_size: int = 16) -> ad.Tensor:
    """Decoupled loss averaged over the global view and its patch crops.

    Each crop embedding acts as one more augmentation-derived query pulled
    toward the same positives; with no crops this is exactly dscl_loss.
    """
    z = enc.encode_project(pt, image[None] if image.ndim == 3 else image)
    if boxes:
        s = enc.embed_patch(pt, image, [list(boxes)], crop_size)
        queries = ad.concat_rows(z, s)
    else:
        queries = z
    rows = queries.shape[0]
    zp = np.asarray(aug_positive, dtype=np.float64).reshape(1, -1)
    zp_rows = np.repeat(zp, rows, axis=0)
    labels = np.full(rows, label)
    return contrastive_loss_batch(queries, zp_rows, labels, snapshot, tau, alpha=alpha)


# ---------------------------------------------------------------------------
# combined objective


def overall_loss(pt: enc.ParamTensors, view_a: np.ndarray, zplus_rows: np.ndarray,
                 labels: np.ndarray, snapshot: Snapshot, config: LossConfig,
                 boxes: list[list[PatchBox]] | None,
                 variant: str = "dscl+pbsd",
                 ema_pt: enc.ParamTensors | None = None,
                 frozen_patch_targets: np.ndarray | None = None,
                 crop_weight: float = 1.0
                 ) -> tuple[ad.Tensor, float, float | None]:
    """Batch objective: contrastive term plus lam times the patch term.

    Returns (total, contrastive value, patch value or None). view_a is the
    (B, H, W, C) batch of online views, zplus_rows the matching detached
    augmentation positives, boxes the per-image patch boxes for variants
    that use them. frozen_patch_targets bypasses the target recomputation;
    finite-difference checks need it because the distillation targets are
    detached, so the objective's gradient is the partial derivative taken
    at fixed targets.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    batch = view_a.shape[0]
    u, v = enc.encode(pt, view_a)
    z = enc.project(pt, v)
    alpha = None if variant.startswith("scl") else config.alpha
    contrastive = contrastive_loss_batch(z, zplus_rows, labels, snapshot,
                                         config.tau, alpha)

    patch_term: ad.Tensor | None = None
    if variant in ("scl+pbsd", "dscl+pbsd", "dscl+pbsd-global"):
        if variant == "dscl+pbsd-global":
            boxes = [[FULL_BOX] for _ in range(batch)]
        num_boxes = len(boxes[0])
        zp_rep = np.repeat(zplus_rows, num_boxes, axis=0)
        if frozen_patch_targets is not None:
            targets = frozen_patch_targets
        else:
            if config.pbsd_target_source == "ema":
                if ema_pt is None:
                    raise ConfigError("ema target source needs an ema binding")
                u_t, _ = enc.encode(ema_pt, view_a)
                c_rows = enc.roi_pool_project(ema_pt, u_t, boxes).data
            else:
                c_rows = enc.roi_pool_project(pt, u, boxes).data  # values only: detached
            targets = pbsd_target_rows(c_rows, zp_rep, snapshot, config.tau)
        s = enc.embed_patch(pt, view_a, boxes, config.crop_size)
        patch_term = distillation_loss_batch(s, zp_rep, snapshot, config.tau, targets)
    elif variant == "dscl+multicrop" and crop_weight > 0.0:
        num_boxes = len(boxes[0])
        s = enc.embed_patch(pt, view_a, boxes, config.crop_size)
        queries = ad.concat_rows(z, s)
        zp_rep = np.concatenate(
            [zplus_rows, np.repeat(zplus_rows, num_boxes, axis=0)], axis=0
        )
        rep_labels = np.concatenate([labels, np.repeat(labels, num_boxes)])
        # the weighted mean over all queries replaces the plain contrastive
        # term; crop rows carry crop_weight relative to the global rows
        logits = _logits(queries, zp_rep, snapshot, config.tau)
        wrows = contrastive_weight_rows(rep_labels, snapshot, config.alpha)
        row_w = np.concatenate([
            np.full(batch, 1.0), np.full(batch * num_boxes, crop_weight)
        ])
        row_w /= row_w.sum()
        contrastive = alignment_loss(logits, wrows, row_w)

    if patch_term is None:
        return contrastive, float(contrastive.data), None
    total = ad.add(contrastive, ad.scale(patch_term, config.lam))
    return total, float(contrastive.data), float(patch_term.data)
