"""Command line surface: gen-data, train, eval, attn-dump."""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import data as data_mod
from .config import ModelConfig, load_config, seed_all
from .errors import LatrefError
from .predictor import predict
from .train import (append_metrics, evaluate, load_checkpoint, save_checkpoint,
                    stack_samples, take, train_model, write_manifest)

ABLATIONS = ("no-latent", "no-sd", "no-vci", "no-margin")


def _config_from_args(args, vocab_size=None):
    if getattr(args, "config", None):
        config = load_config(args.config)
    else:
        config = ModelConfig()
    overrides = {}
    if vocab_size is not None:
        overrides["vocab_size"] = vocab_size
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "gres", False):
        overrides["gres_enabled"] = True
    ablate = getattr(args, "ablate", None)
    if ablate == "no-latent":
        overrides["use_latent"] = False
    elif ablate == "no-sd":
        overrides["use_subject_distributor"] = False
    elif ablate == "no-vci":
        overrides["use_concept_injector"] = False
    elif ablate == "no-margin":
        overrides["use_margin"] = False
    if overrides:
        merged = config.to_dict()
        merged.update(overrides)
        config = ModelConfig.from_dict(merged)
    return config


def cmd_gen_data(args):
    if args.count < 1:
        raise LatrefError("--count must be >= 1")
    splits = [("train", args.count, args.seed),
              ("val", args.val_count, args.seed + 1),
              ("test", args.test_count, args.seed + 2)]
    vocab = data_mod.build_vocabulary()
    os.makedirs(args.out, exist_ok=True)
    data_mod.save_vocab(vocab, args.out)
    for split, count, seed in splits:
        if count < 1:
            continue
        samples, _ = data_mod.generate_dataset(
            count, seed, hw=args.image_hw,
            no_target_fraction=args.no_target_fraction)
        data_mod.save_split(samples, args.out, split)
        n_empty = sum(s.no_target for s in samples)
        print(f"{split}: {count} samples ({n_empty} no-target) -> {args.out}/{split}")
    print(f"dataset hash {data_mod.dataset_hash(args.out)}")
    return 0


def cmd_train(args):
    vocab = data_mod.load_vocab(args.data)
    samples = data_mod.load_split(args.data, args.split)
    config = _config_from_args(args, vocab_size=len(vocab))
    if config.image_hw != samples[0].image.shape[0]:
        merged = config.to_dict()
        merged["image_hw"] = samples[0].image.shape[0]
        config = ModelConfig.from_dict(merged)

    lr = args.lr
    if config.gres_enabled:
        lr = lr / 2.0  # more stable no-target training
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    model, history = train_model(
        config, samples, steps=args.steps, batch_size=args.batch, lr=lr,
        weight_decay=args.weight_decay, cont_start=args.cont_start,
        log_path=log_path, quiet=False)

    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint.pt")
    save_checkpoint(model, ckpt, step=args.steps)
    write_manifest(os.path.join(args.out, "manifest.json"), config, config.seed,
                   data_mod.dataset_hash(args.data), ckpt)
    print(f"trained {args.steps} steps (lr {lr}) -> {ckpt}")
    print(f"final loss {history[-1]['total']:.4f}")
    return 0


def cmd_eval(args):
    model, config = load_checkpoint(args.checkpoint)
    samples = data_mod.load_split(args.data, args.split)
    seed_all(args.seed if args.seed is not None else config.seed)
    report = evaluate(model, samples, include_no_target=args.include_no_target)

    data_hash = data_mod.dataset_hash(args.data)
    header = {"checkpoint": args.checkpoint, "dataset_hash": data_hash,
              "split": args.split}
    out_path = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                        f"report_{args.split}.txt")
    from .metrics import write_report
    write_report(report, out_path, header=header)
    if args.dump_preds:
        _dump_predictions(model, samples, args.dump_preds)
    manifest = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "manifest.json")
    if os.path.exists(manifest):
        append_metrics(manifest, {"split": args.split, "dataset_hash": data_hash,
                                  "miou": report.miou, "oiou": report.oiou,
                                  "n_acc": report.n_acc})
    print(report.summary())
    return 0


def _dump_predictions(model, samples, path):
    """Line-delimited per-sample records: RLE mask, box, empty fields."""
    cfg = model.config
    batch = stack_samples(samples, cfg.m_max, dtype=next(model.parameters()).dtype)
    with open(path, "w") as fh:
        for start in range(0, len(samples), 64):
            idx = torch.arange(start, min(start + 64, len(samples)))
            chunk = take(batch, idx)
            for off, pred in enumerate(predict(model, chunk.images, chunk.token_ids,
                                               chunk.lengths)):
                mask = pred.mask.numpy()
                fh.write(json.dumps({
                    "id": start + off,
                    "hw": list(mask.shape),
                    "rle": data_mod.encode_rle(mask),
                    "box": list(pred.box) if pred.box is not None else None,
                    "empty_logit": pred.empty_logit,
                    "empty_decision": pred.empty_decision,
                }) + "\n")


def write_float_grid(grid, path):
    """Portable float grid: 'rows cols' header then one text row per line."""
    arr = np.asarray(grid, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(f"{v:.8e}" for v in row) + "\n")


def read_float_grid(path):
    with open(path) as fh:
        rows, cols = (int(v) for v in fh.readline().split())
        arr = np.array([[float(v) for v in fh.readline().split()] for _ in range(rows)])
    if arr.shape != (rows, cols):
        raise LatrefError("float grid does not match its header")
    return arr


def attention_grids(model, sample):
    """Layer-averaged attention of each expression's class token over the
    visual patch keys, normalized to sum 1. Returns (grids, concept_maps)."""
    cfg = model.config
    batch = stack_samples([sample], cfg.m_max, dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(batch.images, batch.token_ids, batch.lengths, collect=True)
    finally:
        model.train(was_training)
    diag = out["diag"]
    n = cfg.n_patches
    side = cfg.grid_hw
    # query rows: text class, then each latent class
    rows = [n + 1]
    offset = n + 1 + cfg.m_max + 1
    for k in cfg.k_list if model.latent_init is not None else ():
        rows.append(offset)
        offset += k + 2
    stack = torch.stack([a.mean(dim=1)[0] for a in diag["attention"]])  # [L, S, S]
    mean_attn = stack.mean(dim=0)
    grids = []
    for r in rows:
        grid = mean_attn[r, 1:n + 1].reshape(side, side)
        grids.append((grid / grid.sum()).numpy())
    concept_maps = []
    for layer in diag["concepts"]:
        if layer is not None:
            concept_maps.append(layer["attr_weights"][0].numpy())
    return grids, concept_maps


def cmd_attn_dump(args):
    model, config = load_checkpoint(args.checkpoint)
    samples = data_mod.load_split(args.data, args.split)
    if not (0 <= args.sample < len(samples)):
        raise LatrefError(f"sample {args.sample} outside split of {len(samples)}")
    sample = samples[args.sample]
    os.makedirs(args.out, exist_ok=True)
    grids, concept_maps = attention_grids(model, sample)
    names = ["input_expr"] + [f"latent_expr_{i + 1}" for i in range(len(grids) - 1)]
    for name, grid in zip(names, grids):
        write_float_grid(grid, os.path.join(args.out, f"attn_{name}.grid"))
    for layer_idx, cmap in enumerate(concept_maps):
        write_float_grid(cmap, os.path.join(args.out, f"concept_attribution_layer{layer_idx}.grid"))
    if args.overlay:
        _write_overlays(sample.image, grids, names, args.out)
    print(f"wrote {len(grids)} attention grids and {len(concept_maps)} "
          f"concept maps to {args.out}")
    return 0


def _write_overlays(image, grids, names, out_dir):
    from PIL import Image
    H = image.shape[0]
    base = (np.asarray(image) * 255).astype(np.uint8)
    for name, grid in zip(names, grids):
        heat = grid / (grid.max() + 1e-12)
        heat = np.kron(heat, np.ones((H // grid.shape[0], H // grid.shape[1])))
        overlay = base.copy()
        overlay[..., 0] = np.clip(base[..., 0] * 0.4 + heat * 255 * 0.6, 0, 255)
        Image.fromarray(overlay).save(os.path.join(out_dir, f"overlay_{name}.png"))


def build_parser():
    parser = argparse.ArgumentParser(prog="latref",
                                     description="referring grounding with latent expressions")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--count", type=int, required=True, help="train split size")
    g.add_argument("--val-count", type=int, default=400)
    g.add_argument("--test-count", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-hw", type=int, default=64)
    g.add_argument("--no-target-fraction", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--cont-start", type=int, default=1000,
                   help="step at which the contrastive term joins the loss")
    t.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.pt)")
    t.add_argument("--gres", action="store_true", help="enable the no-target head")
    t.add_argument("--ablate", choices=ABLATIONS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", help="report path")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--include-no-target", action="store_true")
    e.add_argument("--dump-preds", help="also write per-sample predictions (jsonl)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn-dump", help="export attention and concept maps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="val")
    a.add_argument("--sample", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--overlay", action="store_true")
    a.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    # small-tensor workloads run faster without intra-op threading
    torch.set_num_threads(max(1, args.threads))
    if getattr(args, "seed", None) is not None:
        seed_all(args.seed)
    try:
        return args.func(args)
    except LatrefError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
