"""Shared self-attention encoder over [V, T, Z^1..Z^N].

Pre-norm layout with residuals around the attention and the per-stream
experts: the visual and textual streams get two-layer MLP experts, each latent
expression gets a single linear map. After the experts the subject distributor
re-copies the visual subject row into every latent expression, and the concept
injector refreshes the attribute tokens.
"""

import torch
import torch.nn as nn

from .errors import ShapeMismatch


class SharedAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        if d % heads != 0:
            raise ShapeMismatch("d must divide into heads")
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x, key_mask, need_weights=False):
        # x [B, S, d]; key_mask [B, S] bool, True = attend to this key
        B, S, d = x.shape
        qkv = self.qkv(x).reshape(B, S, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)                # each [B, h, S, d/h]
        if need_weights:
            scores = (q @ k.transpose(-2, -1)) * self.scale  # [B, h, S, S]
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
            attn = torch.softmax(scores, dim=-1)
            out = attn @ v
        else:
            attn = None
            out = torch.nn.functional.scaled_dot_product_attention(
                q, k, v, attn_mask=key_mask[:, None, None, :], scale=self.scale)
        out = self.proj(out.transpose(1, 2).reshape(B, S, d))
        return out, attn


class Mlp(nn.Module):
    def __init__(self, d, hidden):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, config):
        super().__init__()
        d = config.d
        self.norm_attn = nn.LayerNorm(d)
        self.attn = SharedAttention(d, config.heads)
        self.norm_visual = nn.LayerNorm(d)
        self.ffn_visual = Mlp(d, d * config.mlp_ratio)
        self.norm_textual = nn.LayerNorm(d)
        self.ffn_textual = Mlp(d, d * config.mlp_ratio)
        n_latent = config.n_latent if config.use_latent else 0
        self.norm_latents = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_latent))
        self.latent_experts = nn.ModuleList(nn.Linear(d, d) for _ in range(n_latent))

    def attend(self, embeds, need_weights=False):
        x, key_mask = embeds.concat()
        out, attn = self.attn(self.norm_attn(x), key_mask, need_weights=need_weights)
        return embeds.split(x + out), attn

    def apply_experts(self, embeds):
        if len(embeds.latents) != len(self.latent_experts):
            raise ShapeMismatch("latent stream count does not match expert count")
        embeds.visual = embeds.visual + self.ffn_visual(self.norm_visual(embeds.visual))
        embeds.textual = embeds.textual + self.ffn_textual(self.norm_textual(embeds.textual))
        embeds.latents = [
            z + expert(norm(z))
            for z, norm, expert in zip(embeds.latents, self.norm_latents, self.latent_experts)
        ]
        return embeds


def distribute_subject(embeds):
    """Overwrite row 1 of every latent expression with the current visual
    subject row; everything else untouched."""
    subject = embeds.visual[:, :1]
    embeds.latents = [torch.cat([z[:, :1], subject, z[:, 2:]], dim=1)
                      for z in embeds.latents]
    return embeds


class Encoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))
        self.injector = None
        if config.use_latent and config.use_concept_injector:
            from .concepts import ConceptInjector
            self.injector = ConceptInjector(config)

    def forward(self, embeds, collect=False):
        """Run all layers. With collect=True also returns per-layer attention
        maps, concept diagnostics, and layer-boundary snapshots."""
        cfg = self.config
        distribute = cfg.use_latent and cfg.use_subject_distributor and not cfg.gres_enabled
        diag = {"attention": [], "concepts": [], "snapshots": []} if collect else None
        for idx, layer in enumerate(self.layers):
            embeds, attn = layer.attend(embeds, need_weights=collect)
            embeds = layer.apply_experts(embeds)
            if distribute and embeds.latents:
                embeds = distribute_subject(embeds)
            if self.injector is not None:
                embeds, cdiag = self.injector(embeds, idx, collect=collect)
            else:
                cdiag = None
            if collect:
                diag["attention"].append(attn)
                diag["concepts"].append(cdiag)
                diag["snapshots"].append(embeds.clone())
        return embeds, diag
