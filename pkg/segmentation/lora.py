"""
Low-rank adaptation of the encoder's attention query/value projections:
W' = W + (scale / rank) · B · A, with B zero-initialized.
"""
import logging
import math

import torch
from torch import nn

from guidewire_platform.exceptions import LoRAError

from .networks import Attention

logger = logging.getLogger(__name__)

LORA_TARGETS = ('q_proj', 'v_proj')


class LoRALinear(nn.Module):

    def __init__(self, base: nn.Linear, rank, scale):
        super().__init__()
        if rank < 1:
            raise LoRAError(f'LoRA rank must be at least 1, got {rank}')
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x):
        delta = (x @ self.lora_A.t()) @ self.lora_B.t()
        return self.base(x) + delta * (self.scale / self.rank)

    def delta_weight(self):
        return (self.scale / self.rank) * (self.lora_B @ self.lora_A)

    def effective_weight(self):
        return self.base.weight + self.delta_weight()


def lora_modules(model):
    return [module for module in model.modules() if isinstance(module, LoRALinear)]


def has_lora(model):
    return bool(lora_modules(model))


def is_adapter_parameter(name):
    return 'lora_A' in name or 'lora_B' in name


def attach_lora(model, rank=None, scale=None):
    """
    Wrap every encoder attention q/v projection. Afterwards only adapters,
    the prompt encoder and the decoder train (plus the base encoder when
    ``config.tune_base_encoder`` is set).
    """
    if has_lora(model):
        raise LoRAError('LoRA adapters are already attached')
    rank = model.config.lora_rank if rank is None else rank
    scale = model.config.lora_scale if scale is None else scale

    attention_layers = [m for m in model.image_encoder.modules() if isinstance(m, Attention)]
    if not attention_layers:
        raise LoRAError('model has no attention layers to adapt')
    for attention in attention_layers:
        for target in LORA_TARGETS:
            setattr(attention, target, LoRALinear(getattr(attention, target), rank, scale))

    mark_trainable(model)
    logger.debug('Attached rank-%d LoRA to %d attention layers', rank, len(attention_layers))
    return model


def mark_trainable(model):
    tune_base = model.config.tune_base_encoder
    for name, parameter in model.named_parameters():
        if name.startswith('image_encoder.'):
            parameter.requires_grad_(tune_base or is_adapter_parameter(name))
        else:
            parameter.requires_grad_(True)


def freeze_adapters(model):
    for name, parameter in model.named_parameters():
        if is_adapter_parameter(name):
            parameter.requires_grad_(False)
    return model


def freeze_model(model):
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    return model


@torch.no_grad()
def merge_lora(model):
    """Fold every adapter into its base projection and drop the adapters."""
    for attention in [m for m in model.image_encoder.modules() if isinstance(m, Attention)]:
        for target in LORA_TARGETS:
            adapter = getattr(attention, target)
            if not isinstance(adapter, LoRALinear):
                continue
            merged = nn.Linear(adapter.base.in_features, adapter.base.out_features)
            merged.weight.copy_(adapter.effective_weight())
            merged.bias.copy_(adapter.base.bias)
            setattr(attention, target, merged)
    return model


def lora_settings(model):
    adapters = lora_modules(model)
    if not adapters:
        return None
    return {'rank': adapters[0].rank, 'scale': adapters[0].scale}


def trainable_parameters(model):
    return [parameter for parameter in model.parameters() if parameter.requires_grad]
