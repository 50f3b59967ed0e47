"""Training objectives.

Every loss is a plain function of tensors so it can be checked against finite
differences and hand-written oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

# negative, typical, indeterminate, atypical
FINETUNE_CLASS_WEIGHTS = (0.2, 0.2, 0.3, 0.3)


@dataclass
class CompoundLossConfig:
    """Weights of the Dice + weighted cross-entropy objective.

    Defaults are the fine-tuning setting (Dice 0.6, CE 0.4). ``pretrain()`` gives
    the equal-weight, unweighted-class variant used before fine-tuning.
    """

    w_ce: float = 0.4
    w_dice: float = 0.6
    class_weights: tuple[float, ...] = FINETUNE_CLASS_WEIGHTS
    smoothing_eps: float = 1e-6

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.w_ce < 0 or self.w_dice < 0 or self.w_ce + self.w_dice <= 0:
            raise ValueError("loss weights must be >= 0 and not both zero")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")
        if self.smoothing_eps <= 0:
            raise ValueError("smoothing_eps must be positive")

    @classmethod
    def pretrain(cls, num_classes: int = 4) -> CompoundLossConfig:
        return cls(w_ce=0.5, w_dice=0.5, class_weights=(1.0,) * num_classes)


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights=None) -> torch.Tensor:
    """Batch mean of ``w[y] * -log softmax(logits)[y]``.

    Unlike ``F.cross_entropy(weight=...)`` the mean is over samples, not over the
    summed weights, so uniform weights ``w`` scale the loss by ``w``.
    """
    nll = F.cross_entropy(logits, labels, reduction="none")
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
        if w.numel() != logits.shape[-1]:
            raise ValueError(f"{w.numel()} class weights for {logits.shape[-1]} classes")
        nll = nll * w[labels]
    return nll.mean()


def dice_loss(seg_logits: torch.Tensor, gt_mask: torch.Tensor, smoothing_eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss ``1 - (2 sum(g s) + eps) / (sum(g) + sum(s) + eps)``.

    ``s = sigmoid(seg_logits)``; the sums run over every pixel of the batch.
    """
    if seg_logits.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {tuple(seg_logits.shape)} vs {tuple(gt_mask.shape)}")
    s = torch.sigmoid(seg_logits)
    g = gt_mask.to(s.dtype)
    inter = (g * s).sum()
    return 1.0 - (2.0 * inter + smoothing_eps) / (g.sum() + s.sum() + smoothing_eps)


def dice_wce(class_logits, labels, seg_logits, gt_mask, cfg: CompoundLossConfig | None = None) -> torch.Tensor:
    cfg = cfg or CompoundLossConfig()
    total = class_logits.new_zeros(())
    if cfg.w_ce:
        total = total + cfg.w_ce * weighted_cross_entropy(class_logits, labels, cfg.class_weights)
    if cfg.w_dice:
        total = total + cfg.w_dice * dice_loss(seg_logits, gt_mask, cfg.smoothing_eps)
    return total


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, queue: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE with the positive key at index 0 of a (K+1)-way softmax.

    ``q`` and ``k_pos`` are (d,) or (B, d) unit vectors, ``queue`` is (K, d). The
    denominator includes the positive. Returns the batch mean.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    single = q.dim() == 1
    if single:
        q, k_pos = q[None], k_pos[None]
    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ queue.t().to(q.dtype)
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    target = torch.zeros(q.shape[0], dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, target)


def masked_mse(reconstruction: torch.Tensor, target: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels where ``loss_mask`` is 1."""
    if reconstruction.shape != target.shape:
        raise ValueError("reconstruction and target shapes differ")
    m = loss_mask.to(reconstruction.dtype).expand_as(reconstruction)
    n = m.sum()
    if n <= 0:
        raise ValueError("loss_mask selects no pixels")
    return (((reconstruction - target) ** 2) * m).sum() / n
