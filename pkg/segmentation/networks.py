"""
Desk-scale promptable segmentation network.

Image encoder f(x; Δ) is a patch transformer, the prompt encoder g(w; Ω)
turns boxes and points into tokens, and the mask decoder h(z, e; Φ) lets
tokens and the embedding grid cross-attend before upsampling to full
resolution. A prompt-free plain head serves the coarse stage.
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from guidewire_platform.exceptions import DecoderKindError, ShapeMismatchError

from .prompts import PromptSet

PLAIN_CONV_HEAD = 'plain_conv_head'
PROMPT_DECODER = 'prompt_decoder'
DECODER_KINDS = (PLAIN_CONV_HEAD, PROMPT_DECODER)

NO_PROMPT, POSITIVE_POINT, NEGATIVE_POINT, BOX_TOP_LEFT, BOX_BOTTOM_RIGHT = range(5)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (256, 256)
    patch_size: int = 16
    embed_dim: int = 96
    encoder_layers: int = 6
    attention_heads: int = 4
    decoder_kind: str = PROMPT_DECODER
    lora_rank: int = 4
    lora_scale: float = 1.0
    binarize_threshold: float = 0.5
    tune_base_encoder: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'image_size', tuple(int(v) for v in self.image_size))
        height, width = self.image_size
        if self.patch_size < 2 or self.patch_size & (self.patch_size - 1):
            raise ShapeMismatchError('patch_size must be a power of two')
        if height % self.patch_size or width % self.patch_size:
            raise ShapeMismatchError(
                f'image_size {self.image_size} is not divisible by patch_size {self.patch_size}'
            )
        if self.embed_dim % self.attention_heads:
            raise ShapeMismatchError('embed_dim must be divisible by attention_heads')
        if self.embed_dim % 4:
            raise ShapeMismatchError('embed_dim must be divisible by 4 for positional encoding')
        if self.decoder_kind not in DECODER_KINDS:
            raise DecoderKindError(f'unknown decoder_kind {self.decoder_kind!r}')
        if self.lora_rank < 0:
            raise ValueError('lora_rank must be non-negative')
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError('binarize_threshold must lie in (0, 1)')

    @property
    def grid_shape(self):
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    def to_dict(self):
        data = asdict(self)
        data['image_size'] = list(self.image_size)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})


def sinusoidal_encoding(coords, dim, max_frequency=64.0):
    """Encode (N, 2) normalized (row, col) coordinates into (N, dim) features."""
    quarter = dim // 4
    freqs = torch.exp(torch.linspace(0.0, math.log(max_frequency), quarter, dtype=coords.dtype))
    freqs = freqs.to(coords.device) * math.pi
    rows = coords[:, :1] * freqs
    cols = coords[:, 1:2] * freqs
    return torch.cat([rows.sin(), rows.cos(), cols.sin(), cols.cos()], dim=-1)


def grid_encoding(grid_shape, dim):
    gh, gw = grid_shape
    rows = (torch.arange(gh, dtype=torch.float32) + 0.5) / gh
    cols = (torch.arange(gw, dtype=torch.float32) + 0.5) / gw
    coords = torch.stack(torch.meshgrid(rows, cols, indexing='ij'), dim=-1).reshape(-1, 2)
    return sinusoidal_encoding(coords, dim)


def build_upscaler(dim, patch_size):
    """Stack of 2x transposed convolutions from the token grid to full resolution."""
    layers = []
    channels = dim
    for stage in range(int(math.log2(patch_size))):
        out_channels = max(dim // 2 ** (stage + 1), 8)
        layers += [nn.ConvTranspose2d(channels, out_channels, kernel_size=2, stride=2), nn.GELU()]
        channels = out_channels
    return nn.Sequential(*layers), channels


class Attention(nn.Module):
    """Multi-head self-attention with separate q/k/v projections (LoRA targets q and v)."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(b, n, d))


class EncoderBlock(nn.Module):

    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.embed_dim
        gh, gw = config.grid_shape
        self.patch_embed = nn.Conv2d(1, dim, kernel_size=config.patch_size, stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, gh * gw, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [EncoderBlock(dim, config.attention_heads) for _ in range(config.encoder_layers)]
        )
        self.neck = nn.LayerNorm(dim)

    def forward(self, images):
        x = (images / 255.0 - PIXEL_MEAN) / PIXEL_STD
        x = self.patch_embed(x.unsqueeze(1))
        b, d, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.neck(x).reshape(b, gh, gw, d)


class PromptEncoder(nn.Module):
    """One token per point, two per box; the learned no-prompt token stands in for an empty set."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.image_size = config.image_size
        self.embed_dim = config.embed_dim
        self.type_embed = nn.Embedding(5, config.embed_dim)

    def forward(self, prompts: PromptSet):
        if prompts.is_empty:
            return self.type_embed.weight[NO_PROMPT:NO_PROMPT + 1]
        prompts.check_bounds(self.image_size)

        height, width = self.image_size
        coords, kinds = [], []
        for box in prompts.boxes:
            coords += [(box.row_min, box.col_min), (box.row_max, box.col_max)]
            kinds += [BOX_TOP_LEFT, BOX_BOTTOM_RIGHT]
        for point in prompts.points:
            coords.append((point.row, point.col))
            kinds.append(POSITIVE_POINT if point.positive else NEGATIVE_POINT)

        device = self.type_embed.weight.device
        coords = torch.tensor(coords, dtype=torch.float32, device=device)
        coords = (coords + 0.5) / torch.tensor([height, width], dtype=torch.float32, device=device)
        kinds = torch.tensor(kinds, dtype=torch.long, device=device)
        return self.type_embed(kinds) + sinusoidal_encoding(coords, self.embed_dim)


class MaskDecoder(nn.Module):
    """
    Tokens attend to the grid, the grid attends back to the tokens, and the
    mean-pooled tokens drive a hypernetwork over the upsampled grid. Every
    reduction over tokens is symmetric, so token order never matters.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.embed_dim
        self.grid_shape = config.grid_shape
        self.token_to_image = nn.MultiheadAttention(dim, config.attention_heads, batch_first=True)
        self.token_norm = nn.LayerNorm(dim)
        self.token_mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.token_norm2 = nn.LayerNorm(dim)
        self.image_to_token = nn.MultiheadAttention(dim, config.attention_heads, batch_first=True)
        self.image_norm = nn.LayerNorm(dim)
        self.upscaler, channels = build_upscaler(dim, config.patch_size)
        self.hyper_mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, channels))
        self.register_buffer('grid_pe', grid_encoding(config.grid_shape, dim), persistent=False)

    def forward(self, z, tokens):
        b, gh, gw, d = z.shape
        image = z.reshape(b, gh * gw, d)
        pos = self.grid_pe.unsqueeze(0)
        logits = []
        for i in range(b):
            img = image[i:i + 1]
            tok = tokens[i].unsqueeze(0)
            attended, _ = self.token_to_image(tok, img + pos, img, need_weights=False)
            tok = self.token_norm(tok + attended)
            tok = self.token_norm2(tok + self.token_mlp(tok))
            back, _ = self.image_to_token(img + pos, tok, tok, need_weights=False)
            img = self.image_norm(img + back)

            grid = img.transpose(1, 2).reshape(1, d, gh, gw)
            upscaled = self.upscaler(grid)
            weights = self.hyper_mlp(tok.mean(dim=1))
            logits.append(torch.einsum('bchw,bc->bhw', upscaled, weights))
        return torch.cat(logits)


class PlainHead(nn.Module):

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.upscaler, channels = build_upscaler(config.embed_dim, config.patch_size)
        self.classifier = nn.Conv2d(channels, 1, kernel_size=3, padding=1)

    def forward(self, z):
        grid = z.permute(0, 3, 1, 2)
        return self.classifier(self.upscaler(grid)).squeeze(1)


def as_image_batch(images):
    """(H, W) / (B, H, W) arrays or tensors -> float32 (B, H, W) tensor, plus whether it was unbatched."""
    tensor = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    tensor = tensor.to(torch.float32)
    single = tensor.dim() == 2
    return (tensor.unsqueeze(0) if single else tensor), single


class PromptableSegmenter(nn.Module):
    """
    The full model state: encoder weights (Δ), prompt encoder weights (Ω) and
    decoder weights (Φ), plus any LoRA adapters attached to the encoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        if config.decoder_kind == PROMPT_DECODER:
            self.prompt_encoder = PromptEncoder(config)
            self.mask_decoder = MaskDecoder(config)
            self.plain_head = None
        else:
            self.prompt_encoder = None
            self.mask_decoder = None
            self.plain_head = PlainHead(config)

    def encode_image(self, images):
        batch, single = as_image_batch(images)
        if tuple(batch.shape[1:]) != self.config.image_size:
            raise ShapeMismatchError(
                f'image shape {tuple(batch.shape[1:])} does not match configured {self.config.image_size}'
            )
        z = self.image_encoder(batch)
        return z[0] if single else z

    def encode_prompts(self, prompts: PromptSet):
        self.require_decoder(PROMPT_DECODER)
        return self.prompt_encoder(prompts)

    def decode_mask(self, z, prompt_embeddings):
        """
        ``prompt_embeddings`` is one (N, D) tensor shared by the batch or a
        list with one tensor per frame.
        """
        self.require_decoder(PROMPT_DECODER)
        z, single = self._check_embedding(z)
        if torch.is_tensor(prompt_embeddings):
            prompt_embeddings = [prompt_embeddings] * z.shape[0]
        if len(prompt_embeddings) != z.shape[0]:
            raise ShapeMismatchError('one prompt embedding per frame is required')
        logits = self.mask_decoder(z, prompt_embeddings)
        return logits[0] if single else logits

    def plain_decode(self, z):
        self.require_decoder(PLAIN_CONV_HEAD)
        z, single = self._check_embedding(z)
        logits = self.plain_head(z)
        return logits[0] if single else logits

    def segment(self, images, prompts=None):
        """
        Logits for a batch. ``prompts`` is a list of PromptSets (one per
        frame) or None for the end-to-end path.
        """
        z = self.encode_image(images)
        if self.config.decoder_kind == PLAIN_CONV_HEAD:
            if prompts is not None and any(not p.is_empty for p in prompts):
                raise DecoderKindError('the plain head does not accept prompts')
            return self.plain_decode(z)
        single = z.dim() == 3
        count = 1 if single else z.shape[0]
        prompts = prompts if prompts is not None else [PromptSet()] * count
        embeddings = [self.encode_prompts(p) for p in prompts]
        return self.decode_mask(z, embeddings[0] if single else embeddings)

    forward = segment

    def require_decoder(self, kind):
        if self.config.decoder_kind != kind:
            raise DecoderKindError(
                f'operation needs decoder_kind={kind!r}, model has {self.config.decoder_kind!r}'
            )

    def _check_embedding(self, z):
        single = z.dim() == 3
        batch = z.unsqueeze(0) if single else z
        expected = (*self.config.grid_shape, self.config.embed_dim)
        if tuple(batch.shape[1:]) != expected:
            raise ShapeMismatchError(f'embedding shape {tuple(batch.shape[1:])} does not match {expected}')
        return batch, single


def binarize(logits, threshold=0.5):
    """1 where sigmoid(logit) >= threshold, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError('threshold must lie in (0, 1)')
    return (torch.sigmoid(logits) >= threshold).to(torch.uint8)
