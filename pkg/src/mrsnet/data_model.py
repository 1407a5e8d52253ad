"""Dataset schema, in-memory sample types, and the region-stratified split.

The on-disk layout is a single JSON manifest next to the image/mask files:

    {
      "categories": [... 32 lowercase tokens ...],
      "samples": [
        {"image": "imgs/x.png", "mask": "masks/x_0.png", "text": "...",
         "lang": "en"|"zh", "type": "single"|"multi"|"non_object",
         "category": "...", "region": "...", "dimensions": [...]}
      ]
    }

Masks are 8-bit single-channel PNGs, 0 = background, 255 = target,
binarized at load as value > 127.  One image may appear in any number of
sample entries (one entry per referring expression).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

LANGUAGES = ("en", "zh")
ANNOTATION_TYPES = ("single", "multi", "non_object")
EXPRESSION_DIMENSIONS = (
    "size",
    "spatial",
    "color",
    "category-relation",
    "motion",
    "association",
)
SPLIT_NAMES = ("train", "val", "test")

# 32 target categories covering transportation, infrastructure, natural and
# artificial scenes, sports facilities, industrial equipment, and misc objects.
DEFAULT_CATEGORIES = (
    "car",
    "ship",
    "train",
    "airplane",
    "bridge",
    "road",
    "road_intersection",
    "building",
    "airport_runway",
    "lake",
    "river",
    "grassland",
    "open_area",
    "ocean",
    "basketball_court",
    "ground_track_field",
    "soccer_field",
    "tennis_court",
    "badminton_court",
    "golf_course",
    "swimming_pool",
    "wind_turbine",
    "power_line_tower",
    "storage_tank",
    "construction_tower",
    "photovoltaic_panel",
    "parking_lot",
    "dam",
    "chimney",
    "container",
    "harbor",
    "helicopter",
)

MIN_IMAGE_SIDE = 32


class DatasetError(Exception):
    """Fatal problem while reading a dataset (missing files, bad manifest)."""


class ValidationError(DatasetError):
    """A sample violates the schema invariants."""


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Ordered list of exactly 32 unique lowercase category tokens."""

    names: tuple

    def __post_init__(self):
        if len(self.names) != 32:
            raise ValidationError(
                f"taxonomy must have exactly 32 categories, got {len(self.names)}"
            )
        if len(set(self.names)) != len(self.names):
            raise ValidationError("taxonomy categories must be unique")
        for name in self.names:
            if not name or name != name.lower() or any(c.isspace() for c in name):
                raise ValidationError(f"category must be a non-empty lowercase token: {name!r}")

    def __contains__(self, name):
        return name in self.names

    @classmethod
    def default(cls):
        return cls(DEFAULT_CATEGORIES)


@dataclass(frozen=True)
class Expression:
    """A referring expression with its language tag and optional dimension labels."""

    text: str
    language: str
    dimensions: tuple = ()

    def __post_init__(self):
        if not self.text:
            raise ValidationError("expression text must be non-empty")
        if self.language not in LANGUAGES:
            raise ValidationError(f"unknown language {self.language!r}, expected one of {LANGUAGES}")
        for dim in self.dimensions:
            if dim not in EXPRESSION_DIMENSIONS:
                raise ValidationError(
                    f"unknown expression dimension {dim!r}, expected subset of {EXPRESSION_DIMENSIONS}"
                )


@dataclass
class SampleRecord:
    """One manifest entry, before any pixel data is read."""

    sample_id: str
    image_path: str
    mask_path: str
    expression: Expression
    annotation_type: str
    category: str
    region: str


@dataclass
class ReferringSample:
    """A fully materialized sample: image, expression, and binary target mask."""

    sample_id: str
    image: np.ndarray           # (3, H, W) float32 in [0, 1]
    expression: Expression
    mask: np.ndarray            # (H, W) uint8 in {0, 1}
    annotation_type: str
    category: str
    region: str = "default"
    image_path: str = ""
    mask_path: str = ""


@dataclass
class DatasetIndex:
    """All samples plus (possibly empty) split assignments.

    Immutable by convention after construction; safe to share read-only.
    """

    samples: list
    splits: dict = field(default_factory=dict)
    taxonomy: CategoryTaxonomy = field(default_factory=CategoryTaxonomy.default)

    def __post_init__(self):
        self._by_id = {s.sample_id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise ValidationError("sample ids must be unique")

    def __len__(self):
        return len(self.samples)

    def sample(self, sample_id):
        return self._by_id[sample_id]

    def split_samples(self, name):
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}; available: {sorted(self.splits)}")
        return [self._by_id[sid] for sid in self.splits[name]]

    def num_images(self):
        return len({s.image_path for s in self.samples})


def parse_manifest(manifest, base_dir=None):
    """Validate a manifest dict and return (taxonomy, records) without pixel IO.

    ``base_dir`` is prepended to the relative image/mask paths when given.
    """
    if not isinstance(manifest, dict) or "samples" not in manifest:
        raise DatasetError("manifest must be a JSON object with a 'samples' list")
    taxonomy = CategoryTaxonomy(tuple(manifest.get("categories", DEFAULT_CATEGORIES)))
    base = Path(base_dir) if base_dir is not None else None

    records = []
    for i, entry in enumerate(manifest["samples"]):
        try:
            expression = Expression(
                text=entry["text"],
                language=entry["lang"],
                dimensions=tuple(entry.get("dimensions", ())),
            )
            annotation_type = entry["type"]
            category = entry["category"]
        except KeyError as exc:
            raise DatasetError(f"sample {i}: missing manifest key {exc}") from exc
        if annotation_type not in ANNOTATION_TYPES:
            raise ValidationError(
                f"sample {i}: unknown annotation type {annotation_type!r}"
            )
        if category not in taxonomy:
            raise ValidationError(f"sample {i}: unknown category {category!r}")

        image_path = str(base / entry["image"]) if base else entry["image"]
        mask_path = str(base / entry["mask"]) if base else entry["mask"]
        sample_id = f"{i:05d}_{Path(entry['image']).stem}"
        records.append(
            SampleRecord(
                sample_id=sample_id,
                image_path=image_path,
                mask_path=mask_path,
                expression=expression,
                annotation_type=annotation_type,
                category=category,
                region=entry.get("region", "default"),
            )
        )
    return taxonomy, records


def _load_image(path):
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DatasetError(f"image file not found: {path}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_mask(path):
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            arr = np.asarray(gray)
    except FileNotFoundError as exc:
        raise DatasetError(f"mask file not found: {path}") from exc
    return (arr > 127).astype(np.uint8)


def validate_sample(sample):
    """Check the per-sample invariants, raising ValidationError on the first hit."""
    c, h, w = sample.image.shape
    if c != 3:
        raise ValidationError(f"sample {sample.sample_id}: image must have 3 channels, got {c}")
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValidationError(
            f"sample {sample.sample_id}: image sides must be >= {MIN_IMAGE_SIDE}, got {h}x{w}"
        )
    if sample.mask.shape != (h, w):
        raise ValidationError(
            f"sample {sample.sample_id}: mask shape {sample.mask.shape} does not match "
            f"image spatial shape {(h, w)}"
        )
    if not np.isin(sample.mask, (0, 1)).all():
        raise ValidationError(f"sample {sample.sample_id}: mask values must be binary")
    empty = int(sample.mask.sum()) == 0
    if sample.annotation_type == "non_object" and not empty:
        raise ValidationError(
            f"sample {sample.sample_id}: non_object samples must have an all-zero mask"
        )
    if sample.annotation_type != "non_object" and empty:
        raise ValidationError(
            f"sample {sample.sample_id}: {sample.annotation_type} sample has an all-zero mask"
        )


def load_dataset(root_path, manifest_path):
    """Load and validate every sample listed in the manifest.

    Raises DatasetError naming the offending sample on missing files, and
    ValidationError on any invariant violation.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {manifest_path}: {exc}") from exc

    taxonomy, records = parse_manifest(manifest, base_dir=root_path)
    image_cache = {}
    samples = []
    for rec in records:
        try:
            if rec.image_path not in image_cache:
                image_cache[rec.image_path] = _load_image(rec.image_path)
            image = image_cache[rec.image_path]
            mask = _load_mask(rec.mask_path)
        except DatasetError as exc:
            raise DatasetError(f"sample {rec.sample_id}: {exc}") from exc
        sample = ReferringSample(
            sample_id=rec.sample_id,
            image=image,
            expression=rec.expression,
            mask=mask,
            annotation_type=rec.annotation_type,
            category=rec.category,
            region=rec.region,
            image_path=rec.image_path,
            mask_path=rec.mask_path,
        )
        validate_sample(sample)
        samples.append(sample)
    return DatasetIndex(samples=samples, taxonomy=taxonomy)


def largest_remainder_sizes(n, ratios):
    """Split n into len(ratios) integer parts matching the ratios.

    Floors every share, then hands the remaining units to the parts with the
    largest fractional remainder (earlier part wins ties).  Never drops a
    sample.
    """
    shares = [n * r for r in ratios]
    sizes = [math.floor(s) for s in shares]
    remainder = n - sum(sizes)
    # round the fractional parts so float noise cannot flip an exact tie
    fractions = [round(s - z, 9) for s, z in zip(shares, sizes)]
    by_fraction = sorted(range(len(ratios)), key=lambda i: (-fractions[i], i))
    for i in by_fraction[:remainder]:
        sizes[i] += 1
    return sizes


def stratified_split(index, ratios=(0.7, 0.1, 0.2), seed=0):
    """Assign train/val/test splits per region at the given ratios.

    Within each region the counts follow largest-remainder rounding, so the
    per-region proportions are exact to within one sample.  Deterministic for
    a fixed seed; returns a new DatasetIndex sharing the sample objects.
    """
    if len(ratios) != len(SPLIT_NAMES):
        raise ValueError(f"expected {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    by_region = {}
    for sample in index.samples:
        by_region.setdefault(sample.region, []).append(sample.sample_id)

    splits = {name: [] for name in SPLIT_NAMES}
    for region in sorted(by_region):
        ids = by_region[region]
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        sizes = largest_remainder_sizes(len(ids), ratios)
        start = 0
        for name, size in zip(SPLIT_NAMES, sizes):
            splits[name].extend(shuffled[start:start + size])
            start += size
    return DatasetIndex(samples=index.samples, splits=splits, taxonomy=index.taxonomy)


def write_splits(splits, path):
    Path(path).write_text(json.dumps(splits, indent=2) + "\n")


def read_splits(path):
    splits = json.loads(Path(path).read_text())
    for name in SPLIT_NAMES:
        if name not in splits:
            raise DatasetError(f"splits file {path} is missing the {name!r} split")
    return splits


def apply_splits(index, splits):
    """Attach externally computed split lists, checking the partition property."""
    all_ids = [sid for name in splits for sid in splits[name]]
    if len(all_ids) != len(set(all_ids)):
        raise ValidationError("split lists overlap")
    known = {s.sample_id for s in index.samples}
    if set(all_ids) != known:
        raise ValidationError("split lists do not cover the dataset exactly")
    return DatasetIndex(samples=index.samples, splits=dict(splits), taxonomy=index.taxonomy)
