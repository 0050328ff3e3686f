"""Inference heads: mask from the fused map, tight box, no-target decision."""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch


@dataclass
class PredictionOutput:
    prob_map: torch.Tensor                  # [h, w] fused probabilities
    per_expression_maps: List[torch.Tensor] # N+1 grids, text map first
    mask: torch.Tensor                      # [H, W] bool
    box: Optional[Tuple[int, int, int, int]]
    empty_logit: Optional[float] = None
    empty_decision: Optional[bool] = None


def nn_resize(grid, target_hw):
    """Nearest-neighbor resize of the last two dims via center-of-pixel
    index mapping; works for both up- and downsampling."""
    h, w = grid.shape[-2:]
    H, W = target_hw
    rows = ((torch.arange(H, device=grid.device, dtype=torch.float64) + 0.5) * h / H).long()
    cols = ((torch.arange(W, device=grid.device, dtype=torch.float64) + 0.5) * w / W).long()
    return grid[..., rows.clamp(max=h - 1), :][..., cols.clamp(max=w - 1)]


def mask_from_probmap(probs, threshold, target_hw, bilinear=False):
    """Binarize at the threshold, then resize to the target resolution.

    Default order is threshold-then-nearest-resize, which preserves binarity;
    bilinear=True interpolates the probabilities first and thresholds after.
    """
    if bilinear:
        up = torch.nn.functional.interpolate(
            probs[None, None].float(), size=target_hw, mode="bilinear",
            align_corners=False)[0, 0]
        return up >= threshold
    return nn_resize(probs >= threshold, target_hw)


def box_from_mask(mask):
    """Tight (x_min, y_min, x_max, y_max) around foreground pixels, or None."""
    if isinstance(mask, torch.Tensor):
        mask = mask.bool()
        if not bool(mask.any()):
            return None
        rows = torch.any(mask, dim=1).nonzero().squeeze(-1)
        cols = torch.any(mask, dim=0).nonzero().squeeze(-1)
        return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))
    raise TypeError("mask must be a torch tensor")


def predict(model, images, token_ids, lengths):
    """Deterministic inference for a batch; returns one PredictionOutput per
    sample. In no-target mode a positive empty decision zeroes the mask."""
    cfg = model.config
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(images, token_ids, lengths)
    finally:
        model.train(was_training)

    hw = (cfg.image_hw, cfg.image_hw)
    results = []
    for b in range(images.shape[0]):
        probs = out["probs"][b]
        per_maps = [m[b] for m in out["per_maps"]]
        mask = mask_from_probmap(probs, cfg.mask_threshold, hw,
                                 bilinear=cfg.bilinear_mask_resize)
        empty_logit = empty_decision = None
        if cfg.gres_enabled:
            empty_logit = float(out["empty_logits"][b])
            empty_decision = empty_logit > cfg.empty_logit_threshold
            if empty_decision:
                mask = torch.zeros_like(mask)
        results.append(PredictionOutput(
            prob_map=probs,
            per_expression_maps=per_maps,
            mask=mask,
            box=box_from_mask(mask),
            empty_logit=empty_logit,
            empty_decision=empty_decision,
        ))
    return results
