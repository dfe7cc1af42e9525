"""
Training objectives of the fine and coarse stages.

Every prediction argument named ``p_*`` is a logit tensor; the helpers apply
the sigmoid themselves. Targets derived from another prediction (the
``Sig`` operator: sigmoid then threshold) never carry gradient. Dice and
focal are summed over the batch; the trainer divides by batch size.
"""
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from guidewire_platform.exceptions import EmptyPoolError, ShapeMismatchError, TrainingAbortedError

INFONCE = 'infonce'
ATTRACTION = 'attraction'
EMBEDDING_LOSS_FORMS = (INFONCE, ATTRACTION)


@dataclass(frozen=True)
class LossConfig:
    eps_dice: float = 1e-6
    focal_exponent: float = 2.0
    tau: float = 0.3
    lambda_ts: float = 1.0
    lambda_ts_prime: float = 1.0
    lambda_ws_stu: float = 0.5
    lambda_ws_stu_prime: float = 0.5
    lambda_ws_tea: float = 0.5
    lambda_ws_tea_prime: float = 0.5
    lambda_c_focal: float = 0.5
    lambda_c_dice: float = 0.5
    prob_clamp: float = 1e-6
    embedding_loss_form: str = INFONCE
    target_threshold: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError('tau must be positive')
        if self.eps_dice <= 0:
            raise ValueError('eps_dice must be positive')
        if not 0.0 < self.prob_clamp <= 0.01:
            raise ValueError('prob_clamp must lie in (0, 0.01]')
        if self.embedding_loss_form not in EMBEDDING_LOSS_FORMS:
            raise ValueError(f'embedding_loss_form must be one of {EMBEDDING_LOSS_FORMS}')
        if not 0.0 < self.target_threshold < 1.0:
            raise ValueError('target_threshold must lie in (0, 1)')


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError('loss weights must be non-negative')

    def as_dict(self):
        return asdict(self)


WARMUP_WEIGHTS = LossWeights(alpha=0.0, beta=1.0, gamma=0.5, delta=1.0)
SELFTRAIN_WEIGHTS = LossWeights(alpha=5.0, beta=0.0, gamma=1.0, delta=0.0)


class LossParts(NamedTuple):
    ts: Optional[torch.Tensor] = None
    ws: Optional[torch.Tensor] = None
    emb: Optional[torch.Tensor] = None
    pred: Optional[torch.Tensor] = None


def _check_shapes(*tensors):
    shape = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.shape != shape:
            raise ShapeMismatchError(f'shape mismatch: {tuple(shape)} vs {tuple(tensor.shape)}')


def _batched(tensor):
    return tensor.unsqueeze(0) if tensor.dim() == 2 else tensor


def hard_target(logits, threshold=0.5):
    """Sig(p): sigmoid, threshold, detach."""
    return (torch.sigmoid(logits.detach()) >= threshold).to(logits.dtype)


def dice_loss(pred_prob, target, eps=1e-6):
    _check_shapes(pred_prob, target)
    pred = _batched(pred_prob).flatten(1)
    target = _batched(target).to(pred.dtype).flatten(1)
    intersection = (pred * target).sum(dim=1)
    denominator = pred.sum(dim=1) + target.sum(dim=1)
    return (1.0 - (2.0 * intersection + eps) / (denominator + eps)).sum()


def focal_loss(pred_prob, target, exponent=2.0, prob_clamp=1e-6):
    _check_shapes(pred_prob, target)
    p = _batched(pred_prob).clamp(prob_clamp, 1.0 - prob_clamp).flatten(1)
    target = _batched(target).to(p.dtype).flatten(1)
    positive = target * (1.0 - p) ** exponent * torch.log(p)
    negative = (1.0 - target) * p ** exponent * torch.log(1.0 - p)
    return -(positive + negative).mean(dim=1).sum()


def ts_loss(p_stu, p_stu_aug, p_tea, config: LossConfig):
    _check_shapes(p_stu, p_stu_aug, p_tea)
    target = hard_target(p_tea, config.target_threshold)
    return (config.lambda_ts * dice_loss(torch.sigmoid(p_stu), target, config.eps_dice)
            + config.lambda_ts_prime * dice_loss(torch.sigmoid(p_stu_aug), target, config.eps_dice))


def ws_loss(p_stu, p_stu_aug, p_tea, p_tea_aug, y_p, config: LossConfig):
    _check_shapes(p_stu, p_stu_aug, p_tea, p_tea_aug, y_p)
    terms = (
        (config.lambda_ws_stu, p_stu),
        (config.lambda_ws_stu_prime, p_stu_aug),
        (config.lambda_ws_tea, p_tea),
        (config.lambda_ws_tea_prime, p_tea_aug),
    )
    return sum(weight * dice_loss(torch.sigmoid(logits), y_p, config.eps_dice) for weight, logits in terms)


def downsample_mask(y_p, grid_shape):
    """Max-pool a full-resolution mask onto the embedding grid (any foreground pixel marks the cell)."""
    mask = _batched(torch.as_tensor(y_p)).to(torch.float32).unsqueeze(1)
    height, width = mask.shape[-2:]
    gh, gw = grid_shape
    if height % gh or width % gw:
        raise ShapeMismatchError(f'mask {height}x{width} does not tile grid {gh}x{gw}')
    pooled = F.max_pool2d(mask, kernel_size=(height // gh, width // gw))
    return pooled.squeeze(1)


def pooled_positive_embedding(z, y_p):
    """z+ = Σ y·z / Σ y over the embedding cells covered by the pseudo-label."""
    if z.dim() != 3:
        raise ShapeMismatchError('pooled_positive_embedding expects a single (h, w, d) embedding')
    cells = downsample_mask(y_p, z.shape[:2])[0].to(z.dtype)
    total = cells.sum()
    if total <= 0:
        raise EmptyPoolError('pseudo-label is empty on the embedding grid')
    return (cells.unsqueeze(-1) * z).sum(dim=(0, 1)) / total


def embedding_consistency_loss(stu_pools, tea_pools, tau=0.3, form=INFONCE):
    """
    Batch InfoNCE with in-batch negatives; with a single pair (or the
    attraction-only form) it is the mean cosine distance.
    """
    stu = torch.stack(list(stu_pools)) if not torch.is_tensor(stu_pools) else stu_pools
    tea = torch.stack(list(tea_pools)) if not torch.is_tensor(tea_pools) else tea_pools
    if stu.shape != tea.shape:
        raise ShapeMismatchError(f'{stu.shape[0]} student vs {tea.shape[0]} teacher pools')
    if stu.shape[0] < 1:
        raise ShapeMismatchError('embedding consistency needs at least one pair')
    if (stu.norm(dim=1) == 0).any() or (tea.norm(dim=1) == 0).any():
        raise ValueError('cannot normalize a zero embedding')

    stu = F.normalize(stu, dim=1)
    tea = F.normalize(tea, dim=1)
    if form == ATTRACTION or stu.shape[0] == 1:
        return (1.0 - (stu * tea).sum(dim=1)).mean()
    logits = stu @ tea.t() / tau
    labels = torch.arange(stu.shape[0], device=stu.device)
    return F.cross_entropy(logits, labels)


def pred_consistency_loss(p_tea, p_tea_aug, config: LossConfig):
    _check_shapes(p_tea, p_tea_aug)
    target = hard_target(p_tea, config.target_threshold)
    prob = torch.sigmoid(p_tea_aug)
    return (config.lambda_c_focal * focal_loss(prob, target, config.focal_exponent, config.prob_clamp)
            + config.lambda_c_dice * dice_loss(prob, target, config.eps_dice))


def total_loss(parts: LossParts, weights: LossWeights):
    """α·L_ts + β·L_ws + γ·L_emb + δ·L_pred; parts left as None count as 0."""
    for name, value in parts._asdict().items():
        if value is not None and not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise TrainingAbortedError(
                f'non-finite {name} loss', {'part': name, 'value': float(torch.as_tensor(value).detach().sum())}
            )
    coefficients = (weights.alpha, weights.beta, weights.gamma, weights.delta)
    total = torch.zeros(())
    for weight, value in zip(coefficients, parts):
        if value is not None:
            total = total + weight * value
    return total


def loss_values(parts: LossParts):
    """Plain floats for logging; None marks an uncomputed part."""
    return {name: (float(value.detach()) if value is not None else None)
            for name, value in parts._asdict().items()}
