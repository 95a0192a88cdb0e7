"""Compact student: vision token, thinking tokens, causal transformer, LM head
and vision-only auxiliary heads.

The depth, detection, spatial and relation heads read the pooled vision
features and nothing else, so the thinking tokens can only be reached through
the answer loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .sequence import build_sequence, causal_mask
from .tokenizer import EOS, PAD

INIT_STD = 0.02


@dataclass
class StudentOutputs:
    lm_logits: torch.Tensor  # (B, L, vocab)
    hidden: torch.Tensor  # (B, L, hidden) after the final norm
    spatial_features: torch.Tensor  # (B, views, sg, sg, Cs)
    depth_scalar: torch.Tensor  # (B, views, H, W)
    depth_bins: torch.Tensor  # (B, views, H, W, B) probabilities
    det_class_probs: torch.Tensor  # (B, objects, categories)
    det_boxes: torch.Tensor  # (B, objects, 6)
    view_det_probs: torch.Tensor  # (B, views, objects, categories)
    rel_lr: torch.Tensor  # (B, pairs, 2)
    rel_ab: torch.Tensor  # (B, pairs, 2)
    pooled_vision_features: torch.Tensor  # (B, hidden)


class VisionProjector(nn.Module):
    """Pool each view's features and depth, project every view, merge into one token.

    ``token = out(sum_v gelu(in_v(x_v)))``; ``in_v`` carries no bias so an
    all-zero input maps to the output bias.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pool = cfg.vision_pool
        in_dim = cfg.vision_pool**2 * (cfg.feature_channels + 1)
        self.in_proj = nn.ModuleList(nn.Linear(in_dim, cfg.vision_hidden, bias=False) for _ in range(cfg.n_views))
        self.out_proj = nn.Linear(cfg.vision_hidden, cfg.hidden_size)
        self.expected = (cfg.n_views, cfg.grid, cfg.grid, cfg.feature_channels)
        self.depth_norm = cfg.depth_norm

    def forward(self, features: torch.Tensor, depth: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(features.shape[1:]) != self.expected or tuple(depth.shape[1:]) != self.expected[:3]:
            raise ValueError(
                f"vision input shapes {tuple(features.shape[1:])} / {tuple(depth.shape[1:])} "
                f"do not match configured {self.expected} / {self.expected[:3]}"
            )
        x = torch.cat([features, depth.unsqueeze(-1) / self.depth_norm], dim=-1)
        b, v, h, w, c = x.shape
        p = self.pool
        x = x.reshape(b, v, p, h // p, p, w // p, c).mean(dim=(3, 5)).reshape(b, v, -1)
        hidden = torch.stack([F.gelu(proj(x[:, i])) for i, proj in enumerate(self.in_proj)], dim=1)
        per_view = self.out_proj(hidden)
        token = self.out_proj(hidden.sum(dim=1))
        return token, per_view


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.hidden_size)
        self.qkv = nn.Linear(cfg.hidden_size, 3 * cfg.hidden_size)
        self.proj = nn.Linear(cfg.hidden_size, cfg.hidden_size)
        self.ln2 = nn.LayerNorm(cfg.hidden_size)
        self.fc = nn.Linear(cfg.hidden_size, cfg.mlp_dim)
        self.out = nn.Linear(cfg.mlp_dim, cfg.hidden_size)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.n_heads)
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class Student(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        h = cfg.hidden_size
        self.vision = VisionProjector(cfg)
        self.tok_emb = nn.Embedding(cfg.vocab_size, h)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, h)
        self.thinking_tokens = nn.Parameter(torch.zeros(1, cfg.K, h)) if cfg.K > 0 else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(h)
        self.lm_head = nn.Linear(h, cfg.vocab_size)
        n_pix = cfg.n_views * cfg.grid * cfg.grid
        self.depth_head = nn.Linear(h, n_pix * (1 + cfg.depth_bins))
        self.det_head = nn.Linear(h, cfg.max_objects * (cfg.n_categories + 6))
        self.spatial_head = nn.Linear(h, cfg.spatial_grid**2 * cfg.spatial_channels)
        self.relation_head = nn.Linear(h, max(cfg.max_pairs, 1) * 4)

    # ------------------------------------------------------------------ init

    def reset_parameters(self, seed: int) -> None:
        """Gaussian N(0, 0.02^2) weights and zero biases; residual output
        projections use 0.02 / sqrt(2 * n_layers) and the vision projector
        uses fan-in scaling 1 / sqrt(fan_in). LayerNorms start at identity."""
        gen = torch.Generator().manual_seed(seed)
        resid_std = INIT_STD / math.sqrt(2 * self.cfg.n_layers)

        def normal_(t: torch.Tensor, std: float) -> None:
            t.copy_(torch.randn(t.shape, generator=gen, dtype=t.dtype) * std)

        with torch.no_grad():
            if self.thinking_tokens is not None:
                normal_(self.thinking_tokens, INIT_STD)
            for name, mod in self.named_modules():
                if isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
                elif isinstance(mod, nn.Embedding):
                    normal_(mod.weight, INIT_STD)
                elif isinstance(mod, nn.Linear):
                    if name.startswith("vision."):
                        std = 1.0 / math.sqrt(mod.in_features)
                    elif name.startswith("blocks.") and name.endswith((".proj", ".out")):
                        std = resid_std
                    else:
                        std = INIT_STD
                    normal_(mod.weight, std)
                    if mod.bias is not None:
                        mod.bias.zero_()

    # --------------------------------------------------------------- forward

    def embed(self, input_ids: torch.Tensor, vision: torch.Tensor, t_start: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Token embeddings with V at position 0 and T starting at ``t_start`` (default 1)."""
        b, n = input_ids.shape
        if n > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = self.tok_emb(input_ids.clamp(min=0))
        x = torch.cat([vision.unsqueeze(1), x[:, 1:]], dim=1)
        if self.thinking_tokens is not None:
            if t_start is None:
                x = torch.cat([x[:, :1], self.thinking_tokens.expand(b, -1, -1), x[:, 1 + self.cfg.K :]], dim=1)
            else:
                rows = torch.arange(b).unsqueeze(1)
                cols = t_start.unsqueeze(1) + torch.arange(self.cfg.K).unsqueeze(0)
                x = x.index_put((rows, cols), self.thinking_tokens.expand(b, -1, -1))
        return x + self.pos_emb(torch.arange(n))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        mask = causal_mask(x.shape[1])
        for i, block in enumerate(self.blocks):
            x = block(x, mask)
            if torch.isnan(x).any():
                raise FloatingPointError(f"NaN activations after transformer layer {i}")
        return self.ln_f(x)

    def heads(self, vision: torch.Tensor, per_view: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        b = vision.shape[0]
        d = self.depth_head(vision).view(b, cfg.n_views, cfg.grid, cfg.grid, 1 + cfg.depth_bins)
        det = self.det_head(vision).view(b, cfg.max_objects, cfg.n_categories + 6)
        view_det = self.det_head(per_view).view(b, cfg.n_views, cfg.max_objects, cfg.n_categories + 6)
        rel = self.relation_head(vision).view(b, -1, 2, 2)
        spatial = self.spatial_head(per_view).view(b, cfg.n_views, cfg.spatial_grid, cfg.spatial_grid, cfg.spatial_channels)
        return {
            "depth_scalar": d[..., 0],
            "depth_bins": d[..., 1:].softmax(-1),
            "det_class_probs": det[..., : cfg.n_categories].softmax(-1),
            "det_boxes": det[..., cfg.n_categories :],
            "view_det_probs": view_det[..., : cfg.n_categories].softmax(-1),
            "rel_lr": rel[:, :, 0].softmax(-1),
            "rel_ab": rel[:, :, 1].softmax(-1),
            "spatial_features": spatial,
        }

    def forward(
        self,
        input_ids: torch.Tensor,
        features: torch.Tensor,
        depth: torch.Tensor,
        t_start: Optional[torch.Tensor] = None,
    ) -> StudentOutputs:
        vision, per_view = self.vision(features, depth)
        hidden = self.encode(self.embed(input_ids, vision, t_start))
        return StudentOutputs(
            lm_logits=self.lm_head(hidden),
            hidden=hidden,
            pooled_vision_features=vision,
            **self.heads(vision, per_view),
        )

    # ------------------------------------------------------------- inference

    def _prefix(self, q_ids: Sequence[int]) -> tuple[torch.Tensor, Optional[torch.Tensor], slice]:
        seq = build_sequence(self.cfg.K, q_ids, (), self.cfg.max_seq_len, self.cfg.question_before_thinking)
        ids = torch.as_tensor(seq.input_ids).unsqueeze(0)
        t_start = torch.tensor([seq.span("T").start]) if self.cfg.question_before_thinking else None
        return ids, t_start, seq.span("T")

    @torch.no_grad()
    def generate(
        self,
        features: torch.Tensor,
        depth: torch.Tensor,
        q_ids: Sequence[int],
        max_new_tokens: int = 16,
        seed: int = 0,
    ) -> list[int]:
        """Greedy decoding of the answer for one sample.

        ``seed`` is accepted for interface stability; greedy decoding never
        consumes randomness.
        """
        ids, t_start, _ = self._prefix(q_ids)
        vision, _ = self.vision(features.unsqueeze(0), depth.unsqueeze(0))
        out: list[int] = []
        for _ in range(max_new_tokens):
            if ids.shape[1] >= self.cfg.max_seq_len:
                break
            hidden = self.encode(self.embed(ids, vision, t_start))
            nxt = int(self.lm_head(hidden[0, -1]).argmax())
            if nxt == EOS:
                break
            out.append(nxt)
            ids = torch.cat([ids, torch.tensor([[nxt]])], dim=1)
        return out

    @torch.no_grad()
    def decode_thinking(self, features: torch.Tensor, depth: torch.Tensor, q_ids: Sequence[int]) -> list[int]:
        """Argmax vocabulary id at each thinking position (diagnostic only)."""
        if self.cfg.K == 0:
            return []
        ids, t_start, t_span = self._prefix(q_ids)
        vision, _ = self.vision(features.unsqueeze(0), depth.unsqueeze(0))
        hidden = self.encode(self.embed(ids, vision, t_start))
        return self.lm_head(hidden[0, t_span]).argmax(-1).tolist()


def init_params(cfg: ModelConfig, seed: int) -> Student:
    model = Student(cfg)
    model.reset_parameters(seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = ["Student", "StudentOutputs", "init_params", "count_parameters", "PAD"]
