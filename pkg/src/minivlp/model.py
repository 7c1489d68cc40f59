"""Dual-stream encoders, the two cross encoders, and the task heads.

The text and image encoders produce per-token hidden states plus a
projected, L2-normalized pooled embedding for contrastive ranking. The two
cross encoders fuse the modalities: one keeps image tokens as the
self-attention stream and reads text through cross-attention, the other is
its mirror. A single shared two-class head scores match/mismatch on both
fused [CLS] states; an MLM head decodes the text-primary token states.

All attention is hand-rolled so that cross-attention weights can be
captured for heat maps and so that forward passes stay deterministic
(no dropout anywhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .config import ModelConfig

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
SENSITIVE_ID = 3

MATCH_CLASS = 0  # matching head convention: logits[..., 0] is the "matched" class
MISMATCH_CLASS = 1


@dataclass
class EncodedStream:
    """Per-token hidden states plus the unit-norm pooled embedding."""

    hidden: Tensor  # [B, L, d]
    pooled: Tensor  # [B, d], L2-normalized

    def __iter__(self):
        return iter((self.hidden, self.pooled))


@dataclass
class FusionOutput:
    sequence: Tensor  # [B, L_primary, d]
    cls: Tensor  # [B, d]
    cross_attn: list[Tensor] | None = None  # per layer [B, heads, L_primary, L_other]


class MultiHeadAttention(nn.Module):
    """Self- or cross-attention; optionally returns the softmax weights."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        query: Tensor,
        key_value: Tensor,
        key_mask: Tensor | None = None,
        need_weights: bool = False,
    ) -> tuple[Tensor, Tensor | None]:
        b, lq, d = query.shape
        lk = key_value.shape[1]
        q = self.q_proj(query).view(b, lq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key_value).view(b, lk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(key_value).view(b, lk, self.num_heads, self.head_dim).transpose(1, 2)

        scores = (q @ k.transpose(-2, -1)) * self.scale  # [B, H, Lq, Lk]
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        out = self.out_proj(out)
        return out, (attn if need_weights else None)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-LN transformer block (self-attention + FFN)."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask)[0]
        x = x + self.ffn(self.norm2(x))
        return x


class CrossBlock(nn.Module):
    """Pre-LN block with self-attention, cross-attention, and FFN."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(
        self,
        x: Tensor,
        other: Tensor,
        self_mask: Tensor | None,
        other_mask: Tensor | None,
        need_weights: bool = False,
    ) -> tuple[Tensor, Tensor | None]:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, self_mask)[0]
        out, weights = self.cross_attn(
            self.norm_cross(x), self.norm_kv(other), other_mask, need_weights
        )
        x = x + out
        x = x + self.ffn(self.norm_ffn(x))
        return x, weights


class TextEncoder(nn.Module):
    """BERT-style bidirectional encoder over integer token sequences."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.text_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        nn.init.normal_(self.pos_emb, std=0.02)

    def forward(self, token_ids: Tensor, attention_mask: Tensor) -> Tensor:
        if token_ids.shape[1] > self.cfg.max_text_len:
            raise ValueError(
                f"sequence length {token_ids.shape[1]} exceeds max_text_len "
                f"{self.cfg.max_text_len}"
            )
        if int(token_ids.max()) >= self.cfg.vocab_size:
            raise ValueError("token id out of range for the configured vocabulary")
        x = self.token_emb(token_ids) + self.pos_emb[: token_ids.shape[1]]
        for block in self.blocks:
            x = block(x, attention_mask)
        return self.final_norm(x)


class ImageEncoder(nn.Module):
    """ViT-style encoder: linear patch embedding, [CLS] token, transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.image_patch_size
        self.patch_proj = nn.Linear(3 * p * p, cfg.hidden_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.hidden_dim))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.num_patches + 1, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.image_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_emb, std=0.02)

    def patchify(self, pixels: Tensor) -> Tensor:
        b, c, h, w = pixels.shape
        p = self.cfg.image_patch_size
        x = pixels.reshape(b, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)
        return x

    def forward(self, pixels: Tensor, patch_keep: Tensor | None = None) -> Tensor:
        if pixels.shape[-1] != self.cfg.image_resolution or pixels.shape[-2] != self.cfg.image_resolution:
            raise ValueError(
                f"expected {self.cfg.image_resolution}x{self.cfg.image_resolution} input, "
                f"got {pixels.shape[-2]}x{pixels.shape[-1]}"
            )
        x = self.patch_proj(self.patchify(pixels))
        if patch_keep is not None:
            # zero out masked patch embeddings (distillation-student masking)
            x = x * patch_keep[:, :, None].to(x.dtype)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_emb
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


class CrossEncoder(nn.Module):
    """Stack of cross blocks; the primary stream self-attends and reads the
    other modality through cross-attention keys/values."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossBlock(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.cross_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        self.forward_calls = 0  # instrumentation: batched forward invocations

    def forward(
        self,
        primary: Tensor,
        other: Tensor,
        primary_mask: Tensor | None = None,
        other_mask: Tensor | None = None,
        need_weights: bool = False,
    ) -> FusionOutput:
        if primary.shape[-1] != other.shape[-1]:
            raise ValueError(
                f"feature dim mismatch: primary {primary.shape[-1]} vs other {other.shape[-1]}"
            )
        self.forward_calls += 1
        attn_stack: list[Tensor] = []
        x = primary
        for block in self.blocks:
            x, weights = block(x, other, primary_mask, other_mask, need_weights)
            if need_weights:
                attn_stack.append(weights)
        x = self.final_norm(x)
        return FusionOutput(sequence=x, cls=x[:, 0], cross_attn=attn_stack or None)


class MLMHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.transform = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.norm = nn.LayerNorm(cfg.hidden_dim)
        self.decoder = nn.Linear(cfg.hidden_dim, cfg.vocab_size)

    def forward(self, hidden: Tensor) -> Tensor:
        return self.decoder(self.norm(F.gelu(self.transform(hidden))))


class VLModel(nn.Module):
    """The full two-tower + two-cross-encoder model with task heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.image_encoder = ImageEncoder(cfg)
        self.text_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim, bias=False)
        self.image_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim, bias=False)
        self.cross_image = CrossEncoder(cfg)  # image tokens primary, text via cross-attn
        self.cross_text = CrossEncoder(cfg)  # text tokens primary, image via cross-attn
        self.match_head = nn.Linear(cfg.hidden_dim, 2)
        self.mlm_head = MLMHead(cfg)
        self.tau = nn.Parameter(torch.tensor(float(cfg.tau_init)))
        if cfg.freeze_image_encoder:
            for p in self.image_encoder.parameters():
                p.requires_grad_(False)

    def clamped_tau(self) -> Tensor:
        return self.tau.clamp(min=self.cfg.tau_min)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode_text(self, token_ids: Tensor, attention_mask: Tensor) -> EncodedStream:
        hidden = self.text_encoder(token_ids, attention_mask)
        pooled = F.normalize(self.text_proj(hidden[:, 0]), dim=-1)
        return EncodedStream(hidden=hidden, pooled=pooled)

    def encode_image(self, pixels: Tensor, patch_keep: Tensor | None = None) -> EncodedStream:
        hidden = self.image_encoder(pixels, patch_keep)
        pooled = F.normalize(self.image_proj(hidden[:, 0]), dim=-1)
        return EncodedStream(hidden=hidden, pooled=pooled)

    def fuse_image_primary(
        self,
        image_hidden: Tensor,
        text_hidden: Tensor,
        text_mask: Tensor | None = None,
        need_weights: bool = False,
    ) -> FusionOutput:
        return self.cross_image(image_hidden, text_hidden, None, text_mask, need_weights)

    def fuse_text_primary(
        self,
        text_hidden: Tensor,
        image_hidden: Tensor,
        text_mask: Tensor | None = None,
        need_weights: bool = False,
    ) -> FusionOutput:
        return self.cross_text(text_hidden, image_hidden, text_mask, None, need_weights)

    def match_logits(self, cls: Tensor) -> Tensor:
        if cls.shape[-1] != self.cfg.hidden_dim:
            raise ValueError(
                f"matching head expects dim {self.cfg.hidden_dim}, got {cls.shape[-1]}"
            )
        return self.match_head(cls)

    def match_probability(self, cls: Tensor) -> Tensor:
        return self.match_logits(cls).softmax(dim=-1)[..., MATCH_CLASS]

    def mlm_logits(self, fused_text: Tensor) -> Tensor:
        return self.mlm_head(fused_text)

    def attn_map_layer(self) -> int:
        """Cross layer used for entity heat maps (third layer when deep enough)."""
        if self.cfg.attn_layer_index is not None:
            return self.cfg.attn_layer_index
        return 2 if self.cfg.cross_layers >= 3 else self.cfg.cross_layers - 1


def image_encoder_state_snapshot(model: VLModel) -> dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in model.image_encoder.state_dict().items()}
