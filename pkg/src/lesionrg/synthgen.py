"""Procedural attribute-compositional lesion corpus.

Every class is a combination of shared visual attributes (shape, texture,
intensity, halo) and its report clause is the concatenation of the
attributes' fixed phrases, so visual and lexical features share structure
across seen and novel classes.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .datamodel import (
    SEEN,
    TEST_NOVEL,
    VAL_NOVEL,
    BoundingBox,
    Case,
    ClassCatalog,
    ClassInfo,
    ImageRecord,
    LesionAnnotation,
    TokenSequence,
    BOS,
    EOS,
    catalog_to_json,
    parse_catalog,
    save_manifest,
)

KINDS = ("intensity", "texture", "halo", "shape")  # phrase order inside a clause


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str
    value: str
    phrase: str


ATTRIBUTES: dict[str, AttributeSpec] = {
    a.name: a
    for a in (
        AttributeSpec("circle", "shape", "circle", "round"),
        AttributeSpec("square", "shape", "square", "square"),
        AttributeSpec("triangle", "shape", "triangle", "triangular"),
        AttributeSpec("ring", "shape", "ring", "ring shaped"),
        AttributeSpec("solid", "texture", "solid", "solid"),
        AttributeSpec("speckled", "texture", "speckled", "speckled"),
        AttributeSpec("striped", "texture", "striped", "striped"),
        AttributeSpec("dim", "intensity", "dim", "dim"),
        AttributeSpec("bright", "intensity", "bright", "bright"),
        AttributeSpec("halo", "halo", "present", "haloed"),
    )
}


@dataclass(frozen=True)
class ClassRecipe:
    class_id: int
    attributes: tuple[AttributeSpec, ...]
    # (x0, y0, x1, y1) as image fractions; lesion centres are drawn inside it
    region: tuple[float, float, float, float] = (0.12, 0.12, 0.88, 0.88)

    def attr(self, kind: str) -> AttributeSpec | None:
        for a in self.attributes:
            if a.kind == kind:
                return a
        return None


@dataclass(frozen=True)
class RenderParams:
    image_size: int = 128
    lesions_per_image: tuple[int, int] = (1, 2)
    images_per_case: tuple[int, int] = (1, 4)
    second_class_prob: float = 0.3
    noise_level: float = 8.0
    size_range: tuple[float, float] = (0.14, 0.22)  # lesion side as a fraction of image size
    seed: int = 0

    def validate(self):
        if self.image_size < 64:
            raise ValueError("image size must be >= 64")
        lo, hi = self.lesions_per_image
        if hi < max(lo, 1):
            raise ValueError("lesions per image range empty")
        lo, hi = self.images_per_case
        if lo < 1 or hi < lo:
            raise ValueError("images per case range empty")
        if not 0 < self.size_range[0] <= self.size_range[1] < 0.5:
            raise ValueError("size range empty")


# (name, attributes, partition); 8 seen / 2 validation-novel / 3 test-novel
DEFAULT_CLASSES = (
    ("microaneurysm", ("circle", "solid", "bright"), SEEN),
    ("ring_staining", ("ring", "speckled", "dim", "halo"), SEEN),
    ("laser_scar", ("square", "striped", "bright"), SEEN),
    ("nonperfusion", ("triangle", "solid", "dim"), SEEN),
    ("drusen", ("circle", "striped", "dim", "halo"), SEEN),
    ("hard_exudate", ("ring", "solid", "bright"), SEEN),
    ("blocked_fluorescence", ("square", "speckled", "dim"), SEEN),
    ("neovascularization", ("triangle", "speckled", "bright", "halo"), SEEN),
    ("window_defect", ("circle", "speckled", "bright"), VAL_NOVEL),
    ("pooling", ("square", "solid", "dim", "halo"), VAL_NOVEL),
    ("leakage", ("ring", "striped", "bright"), TEST_NOVEL),
    ("hemorrhage", ("triangle", "striped", "dim"), TEST_NOVEL),
    ("capillary_dropout", ("square", "solid", "bright", "halo"), TEST_NOVEL),
)


def default_catalog() -> ClassCatalog:
    return ClassCatalog(tuple(
        ClassInfo(i, name, attrs, part) for i, (name, attrs, part) in enumerate(DEFAULT_CLASSES)
    ))


def load_class_file(path: str) -> tuple[ClassCatalog, dict[int, ClassRecipe]]:
    """Read a catalog JSON ({"classes": [...]}) and derive recipes from it."""
    with open(path) as fh:
        doc = json.load(fh)
    raw = doc["classes"] if isinstance(doc, dict) else doc
    catalog = parse_catalog(raw)
    regions = {int(c["id"]): tuple(c["region"]) for c in raw if "region" in c}
    return catalog, build_recipes(catalog, regions)


def build_recipes(catalog: ClassCatalog, regions: dict | None = None) -> dict[int, ClassRecipe]:
    regions = regions or {}
    recipes = {}
    for c in catalog.classes:
        unknown = [a for a in c.attributes if a not in ATTRIBUTES]
        if unknown:
            raise ValueError(f"class {c.name!r}: unknown attributes {unknown}")
        attrs = tuple(ATTRIBUTES[a] for a in c.attributes)
        kinds = [a.kind for a in attrs]
        if kinds.count("shape") != 1:
            raise ValueError(f"class {c.name!r}: needs exactly one shape attribute")
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"class {c.name!r}: at most one attribute per visual effect")
        kw = {"region": regions[c.class_id]} if c.class_id in regions else {}
        recipes[c.class_id] = ClassRecipe(c.class_id, attrs, **kw)
    validate_recipes(recipes)
    return recipes


def validate_recipes(recipes: dict[int, ClassRecipe]) -> None:
    sets = {cid: frozenset(a.name for a in r.attributes) for cid, r in recipes.items()}
    if len(set(sets.values())) != len(sets):
        raise ValueError("two classes have identical attribute sets")
    if len(sets) < 2:
        return
    for cid, s in sets.items():
        if not any(s & t for other, t in sets.items() if other != cid):
            raise ValueError(f"class {cid} shares no attribute with any other class")


def novel_attributes_covered(catalog: ClassCatalog) -> bool:
    seen = set().union(*(set(catalog[c].attributes) for c in catalog.seen_ids))
    return all(set(catalog[c].attributes) <= seen for c in catalog.novel_ids)


def compose_report(case_classes, recipes: dict[int, ClassRecipe]) -> str:
    classes = sorted(case_classes)
    if not classes:
        return "no abnormality observed."
    clauses = []
    for cid in classes:
        if cid not in recipes:
            raise ValueError(f"no recipe for class {cid}")
        r = recipes[cid]
        phrases = [r.attr(k).phrase for k in KINDS if r.attr(k) is not None]
        clauses.append("a " + " ".join(phrases) + " lesion is observed.")
    return " ".join(clauses)


# -- rendering ----------------------------------------------------------------

_INTENSITY = {"bright": 235.0, "dim": 150.0, None: 190.0}
_HALO_LEVEL = 95.0
_HALO_WIDTH = 3


def shape_mask(shape: str, side: int) -> np.ndarray:
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    dx, dy = xx - c, yy - c
    r = side / 2.0
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        h = 0.8 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "triangle":
        # apex up; half-width grows linearly towards the base
        t = (dy + r) / (2 * r)
        return (np.abs(dx) <= t * r) & (dy >= -r)
    raise ValueError(f"unknown shape {shape!r}")


def texture_mask(texture: str | None, side: int, rng: np.random.Generator) -> np.ndarray:
    if texture in (None, "solid"):
        return np.ones((side, side), bool)
    if texture == "striped":
        rows = (np.arange(side) // 2) % 2 == 0
        return np.repeat(rows[:, None], side, axis=1)
    if texture == "speckled":
        cells = rng.random(((side + 1) // 2, (side + 1) // 2)) < 0.5
        return np.kron(cells, np.ones((2, 2), bool))[:side, :side]
    raise ValueError(f"unknown texture {texture!r}")


def draw_lesion(recipe: ClassRecipe, side: int, rng: np.random.Generator):
    """Return (intensity patch, painted mask) of size (side + 2*halo)^2."""
    pad = _HALO_WIDTH + 1
    full = side + 2 * pad
    support = np.zeros((full, full), bool)
    support[pad:pad + side, pad:pad + side] = shape_mask(recipe.attr("shape").value, side)
    tex = recipe.attr("texture")
    painted = np.zeros_like(support)
    painted[pad:pad + side, pad:pad + side] = texture_mask(tex.value if tex else None, side, rng)
    painted &= support
    values = np.zeros((full, full))
    inten = recipe.attr("intensity")
    values[painted] = _INTENSITY[inten.value if inten else None]
    if recipe.attr("halo") is not None:
        halo = ndimage.binary_dilation(support, iterations=_HALO_WIDTH) & ~support
        values[halo] = _HALO_LEVEL
        painted = painted | halo
    return values, painted


def _background(size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    vignette = 55.0 - 30.0 * ((xx - cx) ** 2 + (yy - cy) ** 2)
    return vignette + rng.normal(0.0, noise, (size, size))


def render_image(lesion_classes, recipes, params: RenderParams, rng: np.random.Generator):
    """Render one image.

    Returns (uint8 HxWx3 array, list of (class_id, BoundingBox, full-size lesion mask)).
    """
    size = params.image_size
    canvas = _background(size, rng, params.noise_level)
    occupied = np.zeros((size, size), bool)
    lesions = []
    for cid in lesion_classes:
        recipe = recipes[cid]
        for attempt in range(200):
            side = int(round(rng.uniform(*params.size_range) * size))
            values, painted = draw_lesion(recipe, side, rng)
            full = values.shape[0]
            # the class region is a prior; fall back to the whole image when it is crowded
            x0, y0, x1, y1 = recipe.region if attempt < 100 else (0.0, 0.0, 1.0, 1.0)
            cx = rng.uniform(x0, x1) * size
            cy = rng.uniform(y0, y1) * size
            left, top = int(round(cx - full / 2)), int(round(cy - full / 2))
            left = min(max(left, 0), size - full)
            top = min(max(top, 0), size - full)
            window = occupied[max(top - 2, 0):top + full + 2, max(left - 2, 0):left + full + 2]
            if window.any():
                continue
            region = canvas[top:top + full, left:left + full]
            region[painted] = values[painted] + rng.normal(0.0, params.noise_level / 2, painted.sum())
            occupied[top:top + full, left:left + full] = True
            mask = np.zeros((size, size), bool)
            mask[top:top + full, left:left + full] = painted
            ys, xs = np.nonzero(mask)
            box = BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            lesions.append((cid, box, mask))
            break
        else:
            raise RuntimeError("could not place lesion without overlap; reduce lesion count or size")
    gray = np.clip(canvas, 0, 255)
    rgb = np.stack([gray, gray * 0.95, gray * 0.85], axis=-1)
    return rgb.round().astype(np.uint8), lesions


def _case_plan(case_index: int, catalog: ClassCatalog, params: RenderParams):
    rng = np.random.default_rng([params.seed, case_index])
    n_classes = len(catalog)
    classes = [int(rng.integers(n_classes))]
    if n_classes > 1 and rng.random() < params.second_class_prob:
        other = int(rng.integers(n_classes - 1))
        classes.append(other + (other >= classes[0]))
    n_images = int(rng.integers(params.images_per_case[0], params.images_per_case[1] + 1))
    lo = max(params.lesions_per_image[0], 1)
    per_image = []
    for i in range(n_images):
        n = int(rng.integers(lo, params.lesions_per_image[1] + 1))
        first = classes[i % len(classes)]
        per_image.append([first] + [classes[int(rng.integers(len(classes)))] for _ in range(n - 1)])
    for cid in classes:
        if not any(cid in im for im in per_image):
            per_image[-1].append(cid)
    return rng, sorted(classes), per_image


def generate_case(case_index: int, catalog, recipes, params: RenderParams, out_dir: str, write=True):
    """Render one case; returns (Case, list of per-image lesion masks)."""
    rng, classes, per_image = _case_plan(case_index, catalog, params)
    case_id = f"case{case_index:04d}"
    images, masks = [], []
    for j, lesion_classes in enumerate(per_image):
        pixels, lesions = render_image(lesion_classes, recipes, params, rng)
        rel = f"images/{case_id}_{j}.png"
        if write:
            Image.fromarray(pixels, "RGB").save(os.path.join(out_dir, rel))
        anns = tuple(LesionAnnotation(box, cid) for cid, box, _ in lesions)
        images.append(ImageRecord(f"{case_id}/{j}", rel, params.image_size, params.image_size, anns, root=out_dir))
        masks.append([m for _, _, m in lesions])
    text = compose_report(classes, recipes)
    # placeholder tokens; load_manifest re-tokenizes against the corpus vocabulary
    return Case(case_id, tuple(images), text, TokenSequence((BOS, EOS))), masks


def generate_corpus(
    catalog: ClassCatalog,
    params: RenderParams,
    n_cases: int,
    out_dir: str,
    recipes: dict[int, ClassRecipe] | None = None,
) -> str:
    """Write ``manifest.json``, ``recipes.json`` and ``images/`` under out_dir; return the manifest path."""
    params.validate()
    recipes = recipes if recipes is not None else build_recipes(catalog)
    validate_recipes(recipes)
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    cases = [generate_case(i, catalog, recipes, params, out_dir)[0] for i in range(n_cases)]
    manifest = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest, catalog, cases)
    sidecar = {
        "classes": catalog_to_json(catalog),
        "recipes": [
            {"class_id": r.class_id, "region": list(r.region), "attributes": [asdict(a) for a in r.attributes]}
            for r in recipes.values()
        ],
        "render_params": asdict(params),
        "n_cases": n_cases,
    }
    with open(os.path.join(out_dir, "recipes.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")
    return manifest
