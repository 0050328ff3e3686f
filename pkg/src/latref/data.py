"""Procedural referring-scene generator.

Scenes hold 2-5 non-overlapping colored shapes on a dark canvas; each targeted
expression names the target's shape plus one or two of its attributes (color,
size, or position), chosen so the description is unique but deliberately
under-specified. No-target expressions mention a color absent from the whole
scene, so emptiness is visually decidable.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import InfeasibleSpec, ShapeMismatch

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 50, 50),
    "green": (60, 190, 80),
    "blue": (60, 90, 220),
    "yellow": (230, 220, 60),
    "purple": (160, 70, 200),
    "orange": (240, 150, 50),
    "cyan": (70, 210, 210),
    "pink": (240, 130, 180),
}
SIZES = ("small", "large")
CELLS = ("left", "right", "top", "bottom", "center")

# anchor centers and half-extents as fractions of the image edge; the anchor
# spacing keeps even two large neighbors strictly disjoint
_CELL_FRAC = {
    "left": (13 / 64, 32 / 64),
    "right": (51 / 64, 32 / 64),
    "top": (32 / 64, 13 / 64),
    "bottom": (32 / 64, 51 / 64),
    "center": (32 / 64, 32 / 64),
}
_SIZE_FRAC = {"small": 5 / 64, "large": 9 / 64}

# templates: (words, attributes mentioned besides the shape)
TEMPLATES = (
    ("the {color} {shape}", ("color",)),
    ("the {size} {shape}", ("size",)),
    ("the {shape} on the {cell}", ("cell",)),
    ("the {size} {color} {shape}", ("size", "color")),
    ("the {color} {shape} on the {cell}", ("color", "cell")),
    ("the {size} {shape} on the {cell}", ("size", "cell")),
)
_NO_TARGET_TEMPLATES = (0, 3, 4)  # the ones that mention a color


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    cell: str


@dataclass
class SceneSpec:
    objects: List[SceneObject]
    target_index: Optional[int]
    template_id: int
    expression: str


@dataclass
class SceneSample:
    image: np.ndarray                 # [H, W, 3] float32 in [0, 1]
    token_ids: List[int]
    gt_mask: np.ndarray               # [H, W] bool
    gt_box: Optional[tuple]           # (x0, y0, x1, y1) inclusive or None
    no_target: bool
    text: str = ""
    spec: Optional[SceneSpec] = None


def build_vocabulary():
    words = {"the", "on", "small", "large"}
    words.update(SHAPES)
    words.update(COLORS)
    words.update(CELLS)
    return ["<pad>"] + sorted(words)


def tokenize(text, vocab):
    index = {w: i for i, w in enumerate(vocab)}
    return [index[w] for w in text.split()]


def _expression_constraints(template_id, obj):
    words, attrs = TEMPLATES[template_id]
    fields = {"shape": obj.shape}
    for a in attrs:
        fields[a] = getattr(obj, a)
    return words.format(**fields), fields


def parse_expression(text):
    """Recover the attribute constraints from an expression's words."""
    fields = {}
    for word in text.split():
        if word in SHAPES:
            fields["shape"] = word
        elif word in COLORS:
            fields["color"] = word
        elif word in SIZES:
            fields["size"] = word
        elif word in CELLS:
            fields["cell"] = word
    return fields


def matching_objects(fields, objects):
    out = []
    for i, obj in enumerate(objects):
        if all(getattr(obj, key) == val for key, val in fields.items()):
            out.append(i)
    return out


def render(objects, hw):
    """Hard-edged rasterization; returns (image [hw,hw,3] float32, masks list).

    Object masks are exact and pairwise disjoint by anchor construction.
    """
    image = np.zeros((hw, hw, 3), dtype=np.float32)
    ys, xs = np.mgrid[0:hw, 0:hw]
    masks = []
    for obj in objects:
        fx, fy = _CELL_FRAC[obj.cell]
        cx, cy = round(fx * hw), round(fy * hw)
        r = round(_SIZE_FRAC[obj.size] * hw)
        if obj.shape == "circle":
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        elif obj.shape == "square":
            mask = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
        else:  # upward triangle inside the same bounding box
            inside = (ys >= cy - r) & (ys <= cy + r)
            # width grows linearly from apex (cy - r) to base (cy + r)
            half_width = (ys - (cy - r)) / 2.0
            mask = inside & (np.abs(xs - cx) <= half_width)
        rgb = np.array(COLORS[obj.color], dtype=np.float32) / 255.0
        image[mask] = rgb
        masks.append(mask)
    return image, masks


def _sample_scene(rng):
    n_obj = int(rng.integers(2, 6))
    cells = rng.choice(len(CELLS), size=n_obj, replace=False)
    objects = []
    for c in cells:
        objects.append(SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=list(COLORS)[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
            cell=CELLS[c],
        ))
    target = int(rng.integers(n_obj))
    # force one same-shape distractor so the subject word alone is ambiguous
    others = [i for i in range(n_obj) if i != target]
    rival = others[rng.integers(len(others))]
    objects[rival].shape = objects[target].shape
    return objects, target


def _pick_unique_expression(rng, objects, target):
    """Prefer single-attribute mentions; fall back to two attributes."""
    obj = objects[target]
    short, long = [], []
    for tid in range(len(TEMPLATES)):
        text, fields = _expression_constraints(tid, obj)
        if matching_objects(fields, objects) == [target]:
            (short if len(fields) == 2 else long).append((tid, text))
    pool = short if short and (not long or rng.random() < 0.7) else long
    if not pool:
        return None
    return pool[rng.integers(len(pool))]


def _no_target_expression(rng, objects):
    present = {o.color for o in objects}
    absent = [c for c in COLORS if c not in present]
    color = absent[rng.integers(len(absent))]
    tid = _NO_TARGET_TEMPLATES[rng.integers(len(_NO_TARGET_TEMPLATES))]
    probe = SceneObject(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=color,
        size=SIZES[rng.integers(len(SIZES))],
        cell=CELLS[rng.integers(len(CELLS))],
    )
    text, fields = _expression_constraints(tid, probe)
    assert not matching_objects(fields, objects)
    return tid, text


def generate_sample(seed, index, hw, no_target_fraction=0.0, m_max=12, vocab=None,
                    max_retries=64):
    """Deterministic per (seed, index); independent across indices."""
    if vocab is None:
        vocab = build_vocabulary()
    rng = np.random.default_rng([seed, index])
    for _ in range(max_retries):
        objects, target = _sample_scene(rng)
        no_target = bool(rng.random() < no_target_fraction)
        if no_target:
            tid, text = _no_target_expression(rng, objects)
            spec = SceneSpec(objects=objects, target_index=None,
                             template_id=tid, expression=text)
        else:
            picked = _pick_unique_expression(rng, objects, target)
            if picked is None:
                continue
            tid, text = picked
            spec = SceneSpec(objects=objects, target_index=target,
                             template_id=tid, expression=text)
        tokens = tokenize(text, vocab)
        if len(tokens) > m_max:
            raise InfeasibleSpec(f"expression longer than m_max: {text!r}")
        image, masks = render(objects, hw)
        if no_target:
            gt = np.zeros((hw, hw), dtype=bool)
            box = None
        else:
            gt = masks[target]
            from .metrics import tight_box
            box = tight_box(gt)
        return SceneSample(image=image, token_ids=tokens, gt_mask=gt,
                           gt_box=box, no_target=no_target, text=text, spec=spec)
    raise InfeasibleSpec("could not build a uniquely-referring scene")


def generate_dataset(count, seed, hw=64, no_target_fraction=0.0, m_max=12):
    if count < 1:
        raise ValueError("count must be >= 1")
    vocab = build_vocabulary()
    samples = [generate_sample(seed, i, hw, no_target_fraction, m_max, vocab)
               for i in range(count)]
    return samples, vocab


# ---------------------------------------------------------------------------
# on-disk format

def encode_rle(mask):
    """Row-major run lengths, alternating and starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    value = False
    run = 0
    for bit in flat:
        if bit == value:
            run += 1
        else:
            runs.append(run)
            value = bit
            run = 1
    runs.append(run)
    return runs


def decode_rle(runs, hw):
    flat = np.zeros(hw[0] * hw[1], dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != flat.size:
        raise ShapeMismatch("run lengths do not cover the mask")
    return flat.reshape(hw)


def write_image(image, path):
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"{h} {w} {c}\n".encode())
        fh.write(arr.tobytes())


def read_image(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        h, w, c = (int(v) for v in header)
        arr = np.frombuffer(fh.read(), dtype=np.uint8).reshape(h, w, c)
    return arr.astype(np.float32) / 255.0


def save_split(samples, out_dir, split):
    split_dir = os.path.join(out_dir, split)
    img_dir = os.path.join(split_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    ann_path = os.path.join(split_dir, "annotations.jsonl")
    with open(ann_path, "w") as fh:
        for i, s in enumerate(samples):
            rel = f"images/{i:06d}.rgb"
            write_image(s.image, os.path.join(split_dir, rel))
            record = {
                "id": i,
                "image": rel,
                "text": s.text,
                "token_ids": s.token_ids,
                "hw": list(s.gt_mask.shape),
                "rle": encode_rle(s.gt_mask),
                "box": list(s.gt_box) if s.gt_box is not None else None,
                "no_target": s.no_target,
            }
            fh.write(json.dumps(record) + "\n")


def save_vocab(vocab, out_dir):
    with open(os.path.join(out_dir, "vocab.txt"), "w") as fh:
        fh.write("\n".join(vocab) + "\n")


def load_vocab(out_dir):
    with open(os.path.join(out_dir, "vocab.txt")) as fh:
        return fh.read().splitlines()


def load_split(data_dir, split):
    split_dir = os.path.join(data_dir, split)
    samples = []
    with open(os.path.join(split_dir, "annotations.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            mask = decode_rle(rec["rle"], tuple(rec["hw"]))
            samples.append(SceneSample(
                image=read_image(os.path.join(split_dir, rec["image"])),
                token_ids=list(rec["token_ids"]),
                gt_mask=mask,
                gt_box=tuple(rec["box"]) if rec["box"] is not None else None,
                no_target=bool(rec["no_target"]),
                text=rec["text"],
            ))
    return samples


def dataset_hash(data_dir):
    """Content hash over annotations and vocabulary of every split."""
    digest = hashlib.sha256()
    for root, _, files in sorted(os.walk(data_dir)):
        for name in sorted(files):
            if name in ("annotations.jsonl", "vocab.txt"):
                with open(os.path.join(root, name), "rb") as fh:
                    digest.update(name.encode())
                    digest.update(fh.read())
    return digest.hexdigest()
