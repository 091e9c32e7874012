"""Image-text-annotation corpus: on-disk format, loaders, and the synthetic
grounded-scene generator used for all quantitative tests.

A corpus lives in a root directory:

    meta.json          {"d_o": ..., "k_cat": ..., "lexicon": [...]}
    pairs.jsonl        one record per image-text pair
    annotations.jsonl  one record per detector annotation
    images/*.bin       raw float64 pixel blobs, 8-byte (H, W) int32 header
"""

from __future__ import annotations

import base64
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import split_tokens

DEFAULT_MAX_PROPOSALS = 36
_BACKGROUND = 0.12


class CorpusFormatError(ValueError):
    """A corpus file is malformed; message names file and line."""


class ReferentialIntegrityError(ValueError):
    """A pair references an annotation id that does not exist."""


class GenerationError(ValueError):
    """A scene spec cannot be realized (e.g. too many objects per image)."""


@dataclass(frozen=True)
class ObjectProposal:
    box: tuple[float, float, float, float]  # (x1, y1, x2, y2) pixels
    category_id: int
    category_name: str
    roi_feature: np.ndarray  # (d_o,) float64


@dataclass(frozen=True)
class DetectorAnnotation:
    annotation_id: str
    proposals: list[ObjectProposal]


@dataclass(frozen=True)
class ImageTextPair:
    image_id: str
    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]
    caption: str
    annotation_id: str


@dataclass(frozen=True)
class CorpusMeta:
    d_o: int
    k_cat: int
    lexicon: list[str]


@dataclass(frozen=True)
class CategoryDef:
    name: str
    color: tuple[float, float, float]
    shape: str


@dataclass
class SyntheticSceneSpec:
    """Recipe for generated scenes.

    Objects are placed in distinct cells of a grid_cells x grid_cells layout,
    one object per cell, so boxes never fully overlap. Captions are filled
    templates whose numbered slots take category names in reading order
    (top-to-bottom, then left-to-right by box center).
    """

    grid_cells: int = 3
    categories: list[CategoryDef] = field(default_factory=lambda: default_categories(8))
    objects_per_image: tuple[int, int] = (2, 4)
    caption_templates: list[str] = field(
        default_factory=lambda: list(DEFAULT_TEMPLATES)
    )
    cell_pixels: int = 16  # image edge = grid_cells * cell_pixels
    noise_sigma: float = 0.05
    subset_policy: str = "largest"  # "largest" | "uniform"

    @property
    def image_size(self) -> tuple[int, int]:
        edge = self.grid_cells * self.cell_pixels
        return (edge, edge)

    def validate(self) -> None:
        if self.grid_cells < 1:
            raise GenerationError("grid_cells must be >= 1")
        if not self.categories:
            raise GenerationError("at least one category required")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise GenerationError("category names must be distinct")
        for name in names:
            if len(split_tokens(name)) != 1:
                raise GenerationError(f"category name {name!r} is not a single token")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise GenerationError("objects_per_image range must satisfy 1 <= min <= max")
        if hi > self.grid_cells**2:
            raise GenerationError(
                f"{hi} objects cannot fit in a {self.grid_cells}x{self.grid_cells} "
                "placement grid without full overlap"
            )
        if hi > len(self.categories):
            raise GenerationError("objects_per_image max exceeds distinct categories")
        if not self.caption_templates:
            raise GenerationError("at least one caption template required")
        lex = set(names)
        for tpl in self.caption_templates:
            if template_slot_count(tpl) < 1:
                raise GenerationError(f"template {tpl!r} has no category slots")
            static = [t for t in split_tokens(strip_slots(tpl)) if t]
            if any(t in lex for t in static):
                raise GenerationError(
                    f"template {tpl!r} contains a lexicon word outside its slots"
                )
        if self.subset_policy not in ("largest", "uniform"):
            raise GenerationError(f"unknown subset_policy {self.subset_policy!r}")

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSceneSpec":
        cats = [
            CategoryDef(c["name"], tuple(c["color"]), c["shape"])
            for c in obj["categories"]
        ]
        spec = cls(
            grid_cells=obj["grid_cells"],
            categories=cats,
            objects_per_image=tuple(obj["objects_per_image"]),
            caption_templates=list(obj["caption_templates"]),
            cell_pixels=obj.get("cell_pixels", 16),
            noise_sigma=obj.get("noise_sigma", 0.05),
            subset_policy=obj.get("subset_policy", "largest"),
        )
        spec.validate()
        return spec

    def to_json(self) -> dict:
        return {
            "grid_cells": self.grid_cells,
            "categories": [
                {"name": c.name, "color": list(c.color), "shape": c.shape}
                for c in self.categories
            ],
            "objects_per_image": list(self.objects_per_image),
            "caption_templates": list(self.caption_templates),
            "cell_pixels": self.cell_pixels,
            "noise_sigma": self.noise_sigma,
            "subset_policy": self.subset_policy,
        }


DEFAULT_TEMPLATES = (
    "a photo of a {0}",
    "there is a {0} here",
    "a {0} and a {1}",
    "a photo of a {0} near a {1}",
    "a {0} , a {1} and a {2}",
    "a photo of a {0} , a {1} and a {2}",
    "a {0} , a {1} , a {2} and a {3}",
    "a scene with a {0} , a {1} , a {2} and a {3}",
)

_SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "stripe", "dot")
_COLORS = (
    (0.90, 0.15, 0.15),
    (0.15, 0.35, 0.90),
    (0.15, 0.80, 0.25),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.90, 0.90, 0.90),
)


def default_categories(n: int) -> list[CategoryDef]:
    if n > len(_SHAPES):
        raise GenerationError(f"at most {len(_SHAPES)} default categories available")
    return [CategoryDef(_SHAPES[i], _COLORS[i], _SHAPES[i]) for i in range(n)]


def template_slot_count(template: str) -> int:
    """Number of distinct numbered {i} slots in a template."""
    import string

    slots = set()
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None and name != "":
            slots.add(int(name))
    return len(slots)


def strip_slots(template: str) -> str:
    import re

    return re.sub(r"\{\d+\}", " ", template)


# ---------------------------------------------------------------------------
# scene rendering


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = h / 2.0, w / 2.0
    if shape == "circle":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "triangle":
        # apex at top center, base at bottom
        frac = (yy + 0.5) / h
        return np.abs(xx - cx) <= frac * rx
    if shape == "cross":
        return (np.abs(xx - cx) <= w / 6.0) | (np.abs(yy - cy) <= h / 6.0)
    if shape == "ring":
        r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        return (r2 <= 1.0) & (r2 >= 0.25)
    if shape == "diamond":
        return np.abs(yy - cy) / ry + np.abs(xx - cx) / rx <= 1.0
    if shape == "stripe":
        return np.abs(yy - cy) <= h / 6.0
    if shape == "dot":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 0.25
    raise GenerationError(f"unknown shape {shape!r}")


def _draw_object(
    pixels: np.ndarray, cat: CategoryDef, y0: int, x0: int, h: int, w: int
) -> tuple[float, float, float, float]:
    """Draw one object; returns the tight bounding box of painted pixels."""
    mask = _shape_mask(cat.shape, h, w)
    if not mask.any():  # degenerate at tiny sizes; paint one pixel
        mask[h // 2, w // 2] = True
    region = pixels[y0 : y0 + h, x0 : x0 + w]
    region[mask] = np.asarray(cat.color, dtype=np.float64)
    ys, xs = np.nonzero(mask)
    return (
        float(x0 + xs.min()),
        float(y0 + ys.min()),
        float(x0 + xs.max() + 1),
        float(y0 + ys.max() + 1),
    )


def _pick_template(
    templates: list[str], k: int, policy: str, rng: np.random.Generator
) -> str:
    fitting = [t for t in templates if template_slot_count(t) <= k]
    if not fitting:
        raise GenerationError(f"no caption template fits {k} objects")
    if policy == "largest":
        best = max(template_slot_count(t) for t in fitting)
        fitting = [t for t in fitting if template_slot_count(t) == best]
    return fitting[rng.integers(len(fitting))]


def generate_synthetic(
    spec: SyntheticSceneSpec, count: int, seed: int
) -> tuple[list[ImageTextPair], dict[str, DetectorAnnotation]]:
    """Generate a grounded corpus with exactly known phrase-object alignment.

    Deterministic for a given (spec, count, seed); each image derives its own
    sub-seed so the result is independent of generation order.
    """
    spec.validate()
    if count < 1:
        raise GenerationError("count must be >= 1")
    h_img, w_img = spec.image_size
    k_cat = len(spec.categories)
    pairs: list[ImageTextPair] = []
    annotations: dict[str, DetectorAnnotation] = {}
    for idx in range(count):
        rng = np.random.default_rng([seed, idx])
        k = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
        cat_ids = rng.choice(k_cat, size=k, replace=False)
        cells = rng.choice(spec.grid_cells**2, size=k, replace=False)
        pixels = np.full((h_img, w_img, 3), _BACKGROUND, dtype=np.float64)
        drawn = []  # (box, category_id)
        for cat_id, cell in zip(cat_ids, cells):
            cat = spec.categories[int(cat_id)]
            cy, cx = divmod(int(cell), spec.grid_cells)
            size = int(
                round(spec.cell_pixels * rng.uniform(0.55, 0.9))
            )
            size = max(4, min(size, spec.cell_pixels))
            jy = int(rng.integers(0, spec.cell_pixels - size + 1))
            jx = int(rng.integers(0, spec.cell_pixels - size + 1))
            y0 = cy * spec.cell_pixels + jy
            x0 = cx * spec.cell_pixels + jx
            box = _draw_object(pixels, cat, y0, x0, size, size)
            drawn.append((box, int(cat_id)))
        # reading order: by box center, rows first
        drawn.sort(key=lambda t: ((t[0][1] + t[0][3]) / 2, (t[0][0] + t[0][2]) / 2))
        proposals = []
        for box, cat_id in drawn:
            onehot = np.zeros(k_cat, dtype=np.float64)
            onehot[cat_id] = 1.0
            coords = np.array(
                [box[0] / w_img, box[1] / h_img, box[2] / w_img, box[3] / h_img]
            )
            feat = np.concatenate([onehot, coords])
            feat = feat + rng.normal(0.0, spec.noise_sigma, size=feat.shape)
            proposals.append(
                ObjectProposal(
                    box=box,
                    category_id=cat_id,
                    category_name=spec.categories[cat_id].name,
                    roi_feature=feat,
                )
            )
        template = _pick_template(
            spec.caption_templates, k, spec.subset_policy, rng
        )
        n_slots = template_slot_count(template)
        mention_idx = sorted(rng.choice(k, size=n_slots, replace=False))
        names = [proposals[i].category_name for i in mention_idx]
        caption = template.format(*names)
        image_id = f"img{idx:06d}"
        annotation_id = f"ann{idx:06d}"
        pairs.append(ImageTextPair(image_id, pixels, caption, annotation_id))
        annotations[annotation_id] = DetectorAnnotation(annotation_id, proposals)
    return pairs, annotations


def corpus_meta_for_spec(spec: SyntheticSceneSpec) -> CorpusMeta:
    k = len(spec.categories)
    return CorpusMeta(d_o=k + 4, k_cat=k, lexicon=[c.name for c in spec.categories])


# ---------------------------------------------------------------------------
# noun phrase extraction (lexicon matcher)


@dataclass(frozen=True)
class PhraseSpan:
    start: int  # token index, inclusive
    end: int  # token index, exclusive
    text: str


def extract_noun_phrases(caption: str, lexicon: list[str]) -> list[PhraseSpan]:
    """Greedy left-to-right maximal matching of lexicon entries over tokens.

    Matching is case-insensitive; multi-token lexicon entries match token
    subsequences. Spans never overlap. Empty result is valid.
    """
    if not lexicon:
        raise ValueError("lexicon must be non-empty")
    tokens = split_tokens(caption)
    entries = sorted(
        (tuple(split_tokens(e)) for e in lexicon), key=len, reverse=True
    )
    spans: list[PhraseSpan] = []
    i = 0
    while i < len(tokens):
        matched = False
        for entry in entries:
            n = len(entry)
            if n and tuple(tokens[i : i + n]) == entry:
                spans.append(PhraseSpan(i, i + n, " ".join(entry)))
                i += n
                matched = True
                break
        if not matched:
            i += 1
    return spans


# ---------------------------------------------------------------------------
# on-disk format


def _validate_pair(pair: ImageTextPair) -> None:
    px = pair.pixels
    if px.ndim != 3:
        raise CorpusFormatError(f"pair {pair.image_id}: pixels must be H x W x C")
    h, w, _ = px.shape
    if h < 16 or w < 16:
        raise CorpusFormatError(f"pair {pair.image_id}: image smaller than 16px")
    if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
        raise CorpusFormatError(
            f"pair {pair.image_id}: pixel values must be finite and in [0, 1]"
        )
    if not split_tokens(pair.caption):
        raise CorpusFormatError(f"pair {pair.image_id}: caption empty after tokenization")


def _validate_annotation(
    ann: DetectorAnnotation, image_size: tuple[int, int], d_o: int, k_cat: int
) -> None:
    h, w = image_size
    for p in ann.proposals:
        x1, y1, x2, y2 = p.box
        if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
            raise CorpusFormatError(
                f"annotation {ann.annotation_id}: invalid box {p.box} for {w}x{h} image"
            )
        if not (0 <= p.category_id < k_cat):
            raise CorpusFormatError(
                f"annotation {ann.annotation_id}: category_id {p.category_id} out of range"
            )
        if p.roi_feature.shape != (d_o,) or not np.isfinite(p.roi_feature).all():
            raise CorpusFormatError(
                f"annotation {ann.annotation_id}: roi_feature must be finite with dim {d_o}"
            )


def _write_image_blob(path: str, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<ii", h, w))
        f.write(np.ascontiguousarray(pixels, dtype="<f8").tobytes())


def _read_image_blob(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise CorpusFormatError(f"{path}: truncated image header")
        h, w = struct.unpack("<ii", header)
        data = np.frombuffer(f.read(), dtype="<f8")
    if h < 1 or w < 1 or data.size % (h * w) != 0:
        raise CorpusFormatError(f"{path}: blob size inconsistent with {h}x{w} header")
    c = data.size // (h * w)
    return data.reshape(h, w, c).astype(np.float64)


def save_corpus(
    pairs: list[ImageTextPair],
    annotations: dict[str, DetectorAnnotation],
    root: str,
    meta: CorpusMeta,
) -> None:
    """Write a corpus directory. Round-trips bit-exactly through load_corpus."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    with open(os.path.join(root, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(
            {"d_o": meta.d_o, "k_cat": meta.k_cat, "lexicon": meta.lexicon}, f
        )
        f.write("\n")
    written: dict[str, np.ndarray] = {}
    with open(os.path.join(root, "pairs.jsonl"), "w", encoding="utf-8") as f:
        for pair in pairs:
            rel = f"images/{pair.image_id}.bin"
            if pair.image_id in written:
                if not np.array_equal(written[pair.image_id], pair.pixels):
                    raise ValueError(
                        f"image_id {pair.image_id} reused with different pixels"
                    )
            else:
                _write_image_blob(os.path.join(root, rel), pair.pixels)
                written[pair.image_id] = pair.pixels
            rec = {
                "image_id": pair.image_id,
                "caption": pair.caption,
                "annotation_id": pair.annotation_id,
                "image_path": rel,
            }
            f.write(json.dumps(rec) + "\n")
    with open(os.path.join(root, "annotations.jsonl"), "w", encoding="utf-8") as f:
        for ann_id in sorted(annotations):
            ann = annotations[ann_id]
            rec = {
                "annotation_id": ann.annotation_id,
                "proposals": [
                    {
                        "box": list(p.box),
                        "category_id": p.category_id,
                        "category_name": p.category_name,
                        "roi_feature": base64.b64encode(
                            np.ascontiguousarray(p.roi_feature, dtype="<f8").tobytes()
                        ).decode("ascii"),
                    }
                    for p in ann.proposals
                ],
            }
            f.write(json.dumps(rec) + "\n")


def load_meta(root: str) -> CorpusMeta:
    path = os.path.join(root, "meta.json")
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    return CorpusMeta(d_o=obj["d_o"], k_cat=obj["k_cat"], lexicon=list(obj["lexicon"]))


def load_corpus(
    root: str, max_proposals: int = DEFAULT_MAX_PROPOSALS
) -> tuple[list[ImageTextPair], dict[str, DetectorAnnotation]]:
    """Load and validate a corpus directory.

    Annotations longer than max_proposals are truncated to the first
    max_proposals proposals (the cap a real-detector adapter would enforce).
    """
    meta = load_meta(root)
    annotations: dict[str, DetectorAnnotation] = {}
    ann_path = os.path.join(root, "annotations.jsonl")
    with open(ann_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                proposals = []
                for p in rec["proposals"][:max_proposals]:
                    roi = np.frombuffer(
                        base64.b64decode(p["roi_feature"]), dtype="<f8"
                    ).astype(np.float64)
                    proposals.append(
                        ObjectProposal(
                            box=tuple(float(v) for v in p["box"]),
                            category_id=int(p["category_id"]),
                            category_name=str(p["category_name"]),
                            roi_feature=roi,
                        )
                    )
                ann = DetectorAnnotation(str(rec["annotation_id"]), proposals)
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusFormatError(
                    f"annotations.jsonl line {lineno}: {exc}"
                ) from exc
            annotations[ann.annotation_id] = ann
    pairs: list[ImageTextPair] = []
    pairs_path = os.path.join(root, "pairs.jsonl")
    with open(pairs_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pixels = _read_image_blob(os.path.join(root, rec["image_path"]))
                pair = ImageTextPair(
                    image_id=str(rec["image_id"]),
                    pixels=pixels,
                    caption=str(rec["caption"]),
                    annotation_id=str(rec["annotation_id"]),
                )
            except CorpusFormatError:
                raise
            except (KeyError, ValueError, TypeError, OSError) as exc:
                raise CorpusFormatError(f"pairs.jsonl line {lineno}: {exc}") from exc
            if pair.annotation_id not in annotations:
                raise ReferentialIntegrityError(
                    f"pairs.jsonl line {lineno}: annotation_id "
                    f"{pair.annotation_id!r} not found in annotations.jsonl"
                )
            _validate_pair(pair)
            _validate_annotation(
                annotations[pair.annotation_id],
                pair.pixels.shape[:2],
                meta.d_o,
                meta.k_cat,
            )
            pairs.append(pair)
    return pairs, annotations
