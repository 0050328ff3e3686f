"""Training objectives: positive-margin contrastive alignment, fused
probability map, BCE+Dice segmentation loss, and the no-target classifier."""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchTooSmall, DisabledFeature, EmptyNegatives, ShapeMismatch
from .predictor import nn_resize


@dataclass
class LossReport:
    total: torch.Tensor
    pos_cont: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor
    gres_bce: torch.Tensor
    sims: Optional[torch.Tensor] = None   # [B, N] per-expression cosine similarities

    def scalars(self):
        return {k: float(getattr(self, k).detach()) for k in
                ("total", "pos_cont", "bce", "dice", "gres_bce")}


class ProjectionHeads(nn.Module):
    """Map the final text and latent class tokens into a shared comparison
    space: one head for the text token, one shared across latent expressions."""

    def __init__(self, d, with_latent=True):
        super().__init__()
        self.text_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.latent_head = None
        if with_latent:
            self.latent_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, embeds):
        t_o = self.text_head(embeds.textual[:, 0])                       # [B, d]
        z_o = [self.latent_head(z[:, 0]) for z in embeds.latents]        # N x [B, d]
        return t_o, z_o


class FeatureUpsampler(nn.Module):
    """Reshape patch rows to a grid and deconvolve up to quarter resolution.

    Each stride-2 transposed-convolution stage doubles the grid; the stage
    count is log2(patch/4), i.e. the two-stage head at patch 16 and one stage
    at patch 8.
    """

    def __init__(self, config):
        super().__init__()
        p = config.patch_size
        if p % 4 != 0 or (p // 4) & (p // 4 - 1) != 0:
            raise ShapeMismatch(f"patch size {p} is not 4 * power-of-two")
        n_stages = int(math.log2(p // 4))
        self.grid_hw = config.grid_hw
        self.stages = nn.ModuleList(
            nn.ConvTranspose2d(config.d, config.d, kernel_size=2, stride=2)
            for _ in range(n_stages))

    def forward(self, patch_rows):
        # patch_rows [B, n, d] -> [B, H/4, W/4, d]
        B, n, d = patch_rows.shape
        if n != self.grid_hw * self.grid_hw:
            raise ShapeMismatch(f"{n} patch rows do not form a {self.grid_hw}^2 grid")
        x = patch_rows.transpose(1, 2).reshape(B, d, self.grid_hw, self.grid_hw)
        for stage in self.stages:
            x = F.relu(stage(x))
        return x.permute(0, 2, 3, 1)


def fuse_probability_maps(features, text_proj, latent_projs):
    """Average the sigmoid similarity maps of all N+1 class projections.

    features [..., P, d]; each projection [..., d]. Returns (fused [..., P],
    per-projection sigmoid maps list, text map first).
    """
    maps = []
    for proj in [text_proj] + list(latent_projs):
        logits = (features @ proj.unsqueeze(-1)).squeeze(-1)
        maps.append(torch.sigmoid(logits))
    return torch.stack(maps, dim=0).mean(dim=0), maps


def positive_margin_contrastive(pos_sims, neg_sims, gamma, tau):
    """Contrastive loss with a capped positive term.

    pos_sims [..., N]; neg_sims [..., N, K] holds each positive's negative
    similarity set. The positive similarity enters as min(1, gamma + s) so its
    gradient vanishes once alignment exceeds 1 - gamma; the denominator sums
    only over negatives.
    """
    if neg_sims.shape[-1] == 0:
        raise EmptyNegatives("contrastive loss needs at least one negative")
    capped = torch.clamp(gamma + pos_sims, max=1.0)
    log_denom = torch.logsumexp(neg_sims / tau, dim=-1)
    per_pos = capped / tau - log_denom
    return -per_pos.mean()


def segmentation_loss(probs, gt, eps=1.0):
    """Mean binary cross-entropy and Dice loss on a probability grid.

    probs [..., h, w] in [0, 1]; gt binary same shape. Dice is computed per
    sample over the spatial dims, then averaged.
    """
    gt = gt.to(probs.dtype)
    clamped = probs.clamp(1e-7, 1.0 - 1e-7)
    bce = -(gt * clamped.log() + (1.0 - gt) * (1.0 - clamped).log()).mean()
    inter = (probs * gt).flatten(-2).sum(-1)
    total = probs.flatten(-2).sum(-1) + gt.flatten(-2).sum(-1)
    dice = 1.0 - (2.0 * inter + eps) / (total + eps)
    return bce, dice.mean()


class EmptyPredictor(nn.Module):
    """Single-head cross-attention of a learned empty token over the encoder
    output, followed by a linear map to one no-target logit."""

    def __init__(self, d):
        super().__init__()
        self.empty_token = nn.Parameter(torch.zeros(d))
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.head = nn.Linear(d, 1)
        self.scale = d ** -0.5
        nn.init.trunc_normal_(self.empty_token, std=0.02)

    def forward(self, embeds):
        rows, key_mask = embeds.concat()                     # [B, S, d]
        q = self.q(self.empty_token)                         # [d]
        scores = (self.k(rows) @ q) * self.scale             # [B, S]
        scores = scores.masked_fill(~key_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = torch.einsum("bs,bsd->bd", attn, self.v(rows))
        return self.head(ctx).squeeze(-1)                    # [B]


def gres_no_target_loss(empty_module, embeds, labels, enabled=True):
    """No-target logits and their binary cross-entropy against the flags."""
    if not enabled:
        raise DisabledFeature("no-target head called with gres disabled")
    logits = empty_module(embeds)
    bce = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
    return logits, bce


def batch_similarities(t_o, z_o):
    """Cosine similarities between every text projection and every latent
    projection in the batch: [B_text, B_latent, N]."""
    z = torch.stack(z_o, dim=1)                              # [B, N, d]
    t_n = F.normalize(t_o, dim=-1)
    z_n = F.normalize(z, dim=-1)
    return torch.einsum("bd,cnd->bcn", t_n, z_n)


def total_loss(model, batch, cont_weight=1.0):
    """Compose all objective terms for one training batch.

    cont_weight scales the contrastive term; the training loop keeps it at 0
    until the encoder has warmed up (a randomly initialized encoder collapses
    under the alignment pressure before segmentation structure can form).
    """
    cfg = model.config
    out = model(batch.images, batch.token_ids, batch.lengths)
    gt = nn_resize(batch.gt_masks.to(out["probs"].dtype), out["probs"].shape[-2:])
    bce, dice = segmentation_loss(out["probs"], gt)

    zero = out["probs"].new_zeros(())
    pos_cont, sims = zero, None
    if cfg.use_latent and cfg.n_latent > 0 and cont_weight > 0:
        B = batch.images.shape[0]
        if B < 2:
            raise BatchTooSmall("contrastive negatives need a batch of >= 2")
        all_sims = batch_similarities(out["text_proj"], out["latent_projs"])
        idx = torch.arange(B, device=all_sims.device)
        sims = all_sims[idx, idx]                            # [B, N]
        others = ~torch.eye(B, dtype=torch.bool, device=all_sims.device)
        if cfg.exclude_same_text_negatives:
            # identical expressions describe the same semantics; treating them
            # as negatives adds false repulsion, so drop them from the set
            same = (batch.token_ids.unsqueeze(0) == batch.token_ids.unsqueeze(1)).all(-1)
            others &= ~same
        neg_inf = torch.tensor(float("-inf"), dtype=all_sims.dtype,
                               device=all_sims.device)
        negs = torch.where(others.unsqueeze(-1), all_sims, neg_inf)
        negs = negs.reshape(B, B * cfg.n_latent)             # [B, K] per anchor
        if cfg.include_text_negatives:
            t_n = F.normalize(out["text_proj"], dim=-1)
            tt = torch.where(others, t_n @ t_n.T, neg_inf)
            negs = torch.cat([negs, tt], dim=1)
        valid = negs.isfinite().any(dim=-1)                  # anchors with >= 1 negative
        if valid.any():
            neg_sims = negs[valid].unsqueeze(1).expand(-1, cfg.n_latent, -1)
            gamma = cfg.gamma if cfg.use_margin else 0.0
            pos_cont = cont_weight * positive_margin_contrastive(
                sims[valid], neg_sims, gamma, cfg.tau)

    gres_bce = zero
    if cfg.gres_enabled:
        gres_bce = F.binary_cross_entropy_with_logits(
            out["empty_logits"], batch.no_target.to(out["empty_logits"].dtype))

    total = (pos_cont + cfg.lambda_bce * bce + cfg.lambda_dice * dice
             + cfg.gres_loss_weight * gres_bce)
    return LossReport(total=total, pos_cont=pos_cont, bce=bce, dice=dice,
                      gres_bce=gres_bce, sims=sims)
