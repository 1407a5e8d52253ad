"""Synthetic shape datasets for desk-scale training and tests.

Each image contains one or two solid geometric shapes on a gray background;
the referring expression is a template like "the red building".  The masks
are exact shape footprints, so a correct pipeline can memorize a handful of
samples quickly.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data_model import DEFAULT_CATEGORIES

PALETTE = {
    "red": (204, 40, 40),
    "green": (50, 168, 82),
    "blue": (56, 96, 208),
    "yellow": (222, 196, 60),
    "white": (235, 235, 235),
    "dark": (30, 30, 30),
}

# shape kind -> (category token, expression noun)
SHAPES = {
    "rectangle": ("building", "building"),
    "circle": ("storage_tank", "storage tank"),
}


def _draw_shape(draw, kind, color, size, rng):
    margin = size // 8
    if kind == "rectangle":
        w = int(rng.integers(size // 3, size // 2))
        h = int(rng.integers(size // 3, size // 2))
        x0 = int(rng.integers(margin, size - margin - w))
        y0 = int(rng.integers(margin, size - margin - h))
        box = (x0, y0, x0 + w, y0 + h)
        draw.rectangle(box, fill=color)
        return box
    r = int(rng.integers(size // 6, size // 4))
    cx = int(rng.integers(margin + r, size - margin - r))
    cy = int(rng.integers(margin + r, size - margin - r))
    box = (cx - r, cy - r, cx + r, cy + r)
    draw.ellipse(box, fill=color)
    return box


def generate_synthetic_dataset(
    root,
    n_single=8,
    n_multi=0,
    n_non_object=0,
    image_size=128,
    regions=("default",),
    language="en",
    seed=0,
):
    """Write images, masks, and a manifest under ``root``; return the manifest path."""
    root = Path(root)
    (root / "imgs").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    entries = []
    kinds = list(SHAPES)
    colors = list(PALETTE)
    total = n_single + n_multi + n_non_object
    for i in range(total):
        annotation_type = (
            "single" if i < n_single else "multi" if i < n_single + n_multi else "non_object"
        )
        bg = int(rng.integers(90, 130))
        img = Image.new("RGB", (image_size, image_size), (bg, bg, bg))
        mask = Image.new("L", (image_size, image_size), 0)
        img_draw = ImageDraw.Draw(img)
        mask_draw = ImageDraw.Draw(mask)

        kind = kinds[int(rng.integers(len(kinds)))]
        color_name = colors[int(rng.integers(len(colors)))]
        category, noun = SHAPES[kind]

        if annotation_type == "non_object":
            # distractor shape in a different color; the queried color is absent
            other = colors[(colors.index(color_name) + 1) % len(colors)]
            _draw_shape(img_draw, kind, PALETTE[other], image_size, rng)
        else:
            n_shapes = 2 if annotation_type == "multi" else 1
            for _ in range(n_shapes):
                box = _draw_shape(img_draw, kind, PALETTE[color_name], image_size, rng)
                if kind == "rectangle":
                    mask_draw.rectangle(box, fill=255)
                else:
                    mask_draw.ellipse(box, fill=255)

        image_name = f"imgs/{i:04d}.png"
        mask_name = f"masks/{i:04d}.png"
        img.save(root / image_name)
        mask.save(root / mask_name)

        if annotation_type == "multi":
            text = f"all {color_name} {noun}s"
        else:
            text = f"the {color_name} {noun}"
        entries.append(
            {
                "image": image_name,
                "mask": mask_name,
                "text": text,
                "lang": language,
                "type": annotation_type,
                "category": category,
                "region": regions[i % len(regions)],
            }
        )

    manifest = {"categories": list(DEFAULT_CATEGORIES), "samples": entries}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path
