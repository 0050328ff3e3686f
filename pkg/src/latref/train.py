"""Training loop, checkpointing, evaluation, and run manifests."""

import json
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig, seed_all
from .metrics import EvalPair, aggregate, iou
from .model import GroundingModel
from .objectives import total_loss
from .predictor import mask_from_probmap, predict


@dataclass
class Batch:
    images: torch.Tensor      # [B, 3, H, W]
    token_ids: torch.Tensor   # [B, m_max] long
    lengths: torch.Tensor     # [B] long
    gt_masks: torch.Tensor    # [B, H, W]
    no_target: torch.Tensor   # [B] bool


def stack_samples(samples, m_max, dtype=torch.float32):
    """Pack SceneSamples into padded tensors once, for fast batching."""
    B = len(samples)
    images = torch.stack([torch.from_numpy(np.ascontiguousarray(s.image)).permute(2, 0, 1)
                          for s in samples]).to(dtype)
    token_ids = torch.zeros(B, m_max, dtype=torch.long)
    lengths = torch.zeros(B, dtype=torch.long)
    for i, s in enumerate(samples):
        ids = s.token_ids[:m_max]
        token_ids[i, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        lengths[i] = len(ids)
    gt = torch.stack([torch.from_numpy(np.ascontiguousarray(s.gt_mask)) for s in samples]).to(dtype)
    no_target = torch.tensor([s.no_target for s in samples], dtype=torch.bool)
    return Batch(images=images, token_ids=token_ids, lengths=lengths,
                 gt_masks=gt, no_target=no_target)


def take(batch, idx):
    return Batch(images=batch.images[idx], token_ids=batch.token_ids[idx],
                 lengths=batch.lengths[idx], gt_masks=batch.gt_masks[idx],
                 no_target=batch.no_target[idx])


def train_model(config, samples, steps, batch_size=16, lr=1e-4, weight_decay=0.01,
                cont_start=1000, warmup_steps=0, grad_clip=0.0, log_path=None,
                dtype=torch.float32, model=None, log_every=50, quiet=True):
    """Optimize with decoupled-weight-decay Adam; returns (model, history).

    The contrastive term joins at step cont_start: the full-scale recipe never
    applies it to a random encoder (pretrained backbone), and from scratch it
    collapses training unless the encoder warms up first. history holds one
    scalar dict per step. The model is constructed here (seeded from
    config.seed) unless one is passed in.
    """
    seed_all(config.seed)
    if model is None:
        model = GroundingModel(config).to(dtype)
    model.train()
    data = stack_samples(samples, config.m_max, dtype=dtype)
    try:
        opt = torch.optim.AdamW(model.parameters(), lr=lr,
                                weight_decay=weight_decay, fused=True)
    except (RuntimeError, ValueError):
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sampler = torch.Generator().manual_seed(config.seed)

    history = []
    log_fh = open(log_path, "w") if log_path else None
    started = time.time()
    try:
        for step in range(steps):
            if warmup_steps > 0 and step < warmup_steps:
                scale = (step + 1) / warmup_steps
                for group in opt.param_groups:
                    group["lr"] = lr * scale
            idx = torch.randint(len(samples), (batch_size,), generator=sampler)
            cont_weight = 1.0 if step >= cont_start else 0.0
            report = total_loss(model, take(data, idx), cont_weight=cont_weight)
            opt.zero_grad()
            report.total.backward()
            if grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            scalars = {"step": step, **report.scalars()}
            history.append(scalars)
            if log_fh:
                log_fh.write(json.dumps(scalars) + "\n")
            if not quiet and (step % log_every == 0 or step == steps - 1):
                print(f"step {step:5d}  total {scalars['total']:.4f}  "
                      f"bce {scalars['bce']:.4f}  dice {scalars['dice']:.4f}  "
                      f"pos_cont {scalars['pos_cont']:.4f}  "
                      f"[{time.time() - started:.0f}s]")
    finally:
        if log_fh:
            log_fh.close()
    return model, history


def expression_names(n_latent):
    return ["input_expr"] + [f"latent_expr_{i + 1}" for i in range(n_latent)]


def evaluate(model, samples, batch_size=64, include_no_target=False):
    """Score a split; also reports per-expression mIoU from the individual
    (pre-averaging) probability maps."""
    cfg = model.config
    data = stack_samples(samples, cfg.m_max,
                         dtype=next(model.parameters()).dtype)
    hw = (cfg.image_hw, cfg.image_hw)
    pairs = []
    n_maps = 1 + (cfg.n_latent if cfg.use_latent else 0)
    per_expr = [[] for _ in range(n_maps)]
    for start in range(0, len(samples), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(samples)))
        chunk = take(data, idx)
        preds = predict(model, chunk.images, chunk.token_ids, chunk.lengths)
        for off, pred in enumerate(preds):
            s = samples[start + off]
            pairs.append(EvalPair(
                pred_mask=pred.mask.numpy(),
                gt_mask=s.gt_mask,
                no_target=s.no_target,
                empty_decision=pred.empty_decision,
                gt_box=s.gt_box,
            ))
            if not s.no_target:
                for e, emap in enumerate(pred.per_expression_maps):
                    emask = mask_from_probmap(emap, cfg.mask_threshold, hw,
                                              bilinear=cfg.bilinear_mask_resize)
                    per_expr[e].append(iou(emask.numpy(), s.gt_mask))
    report = aggregate(pairs, include_no_target=include_no_target)
    names = expression_names(cfg.n_latent if cfg.use_latent else 0)
    report.per_expression_miou = {
        name: float(np.mean(vals)) for name, vals in zip(names, per_expr) if vals}
    return report


def save_checkpoint(model, path, step=None):
    payload = {
        "config": model.config.to_dict(),
        "model_state": model.state_dict(),
        "step": step,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, dtype=torch.float32):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig.from_dict(payload["config"])
    model = GroundingModel(config).to(dtype)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, config


def write_manifest(path, config, seed, data_hash, checkpoint_path):
    manifest = {
        "config": config.to_dict(),
        "seed": seed,
        "dataset_hash": data_hash,
        "checkpoint": checkpoint_path,
        "metric_history": [],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)


def append_metrics(path, entry):
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["metric_history"].append(entry)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
