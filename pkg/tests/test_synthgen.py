import json

import numpy as np
import pytest
from PIL import Image

from lesionrg.datamodel import ClassCatalog, ClassInfo, load_manifest
from lesionrg.synthgen import (
    ATTRIBUTES, RenderParams, build_recipes, compose_report, default_catalog, generate_case, generate_corpus,
    load_class_file, novel_attributes_covered, render_image, shape_mask, validate_recipes,
)


@pytest.fixture(scope="module")
def recipes():
    return build_recipes(default_catalog())


def test_default_catalog_split_and_transferability():
    cat = default_catalog()
    assert (len(cat.seen_ids), len(cat.ids("validation-novel")), len(cat.ids("test-novel"))) == (8, 2, 3)
    assert novel_attributes_covered(cat)


def test_compose_report_is_deterministic_and_ordered(recipes):
    text = compose_report({3, 0}, recipes)
    assert text == "a bright solid round lesion is observed. a dim solid triangular lesion is observed."
    assert compose_report([0, 3], recipes) == text
    assert compose_report(set(), recipes) == "no abnormality observed."
    with pytest.raises(ValueError):
        compose_report({99}, recipes)


def test_recipe_validation_errors():
    def cat(*attr_sets):
        return ClassCatalog(tuple(ClassInfo(i, f"c{i}", a, "seen") for i, a in enumerate(attr_sets)))

    with pytest.raises(ValueError, match="unknown attributes"):
        build_recipes(cat(("circle", "glowing")))
    with pytest.raises(ValueError, match="exactly one shape"):
        build_recipes(cat(("solid", "dim")))
    with pytest.raises(ValueError, match="one attribute per"):
        build_recipes(cat(("circle", "dim", "bright")))
    with pytest.raises(ValueError, match="identical attribute sets"):
        build_recipes(cat(("circle", "dim"), ("circle", "dim")))
    with pytest.raises(ValueError, match="shares no attribute"):
        build_recipes(cat(("circle", "striped"), ("square", "bright"), ("square", "dim")))


def test_render_params_validation():
    for bad in (RenderParams(image_size=32), RenderParams(lesions_per_image=(2, 1)),
                RenderParams(images_per_case=(0, 2)), RenderParams(size_range=(0.3, 0.6))):
        with pytest.raises(ValueError):
            bad.validate()


@pytest.mark.parametrize("shape", ["circle", "square", "triangle", "ring"])
def test_shape_masks_are_non_empty_and_fit(shape):
    m = shape_mask(shape, 21)
    assert m.shape == (21, 21) and m.any()
    with pytest.raises(ValueError):
        shape_mask("hexagon", 5)


def test_boxes_tightly_enclose_rendered_lesions(recipes):
    """Recorded box vs the rendered mask extent (pixel-mask oracle)."""
    params = RenderParams(seed=5)
    cat = default_catalog()
    for i in range(60):
        case, masks = generate_case(i, cat, recipes, params, out_dir="", write=False)
        for im, im_masks in zip(case.images, masks):
            for ann, mask in zip(im.annotations, im_masks):
                ys, xs = np.nonzero(mask)
                extent = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
                b = ann.box.as_tuple()
                inter = max(0, min(b[2], extent[2]) - max(b[0], extent[0])) * \
                    max(0, min(b[3], extent[3]) - max(b[1], extent[1]))
                union = ann.box.area + (extent[2] - extent[0]) * (extent[3] - extent[1]) - inter
                assert inter / union >= 0.95
                x0, y0, x1, y1 = (int(v) for v in b)
                inside = mask[y0:y1, x0:x1].sum()
                assert inside >= 0.9 * mask.sum()


def test_render_image_pixels_follow_recipe(recipes):
    rng = np.random.default_rng(0)
    params = RenderParams(noise_level=0.0)
    img, lesions = render_image([0], recipes, params, rng)  # bright solid round
    assert img.dtype == np.uint8 and img.shape == (128, 128, 3)
    (cid, box, mask), = lesions
    assert cid == 0
    assert img[..., 0][mask].mean() > 200  # bright
    img2, lesions2 = render_image([3], recipes, params, np.random.default_rng(0))  # dim
    assert 120 < img2[..., 0][lesions2[0][2]].mean() < 180


def test_generation_is_deterministic(tmp_path, recipes):
    cat = default_catalog()
    a = generate_corpus(cat, RenderParams(image_size=64, seed=3), 6, str(tmp_path / "a"))
    b = generate_corpus(cat, RenderParams(image_size=64, seed=3), 6, str(tmp_path / "b"))
    assert json.load(open(a)) == json.load(open(b))
    for k in range(6):
        pa = np.asarray(Image.open(tmp_path / "a" / "images" / f"case{k:04d}_0.png"))
        pb = np.asarray(Image.open(tmp_path / "b" / "images" / f"case{k:04d}_0.png"))
        assert (pa == pb).all()


def test_corpus_manifest_loads_with_consistent_reports(corpus):
    cat, cases, vocab = corpus
    recipes = build_recipes(cat)
    for c in cases:
        assert 1 <= len(c.images) <= 4
        assert c.report_text == compose_report(c.case_classes, recipes)
        assert all(t != 3 for t in c.report.tokens)  # no unknown tokens


def test_class_file_roundtrip(tmp_path):
    classes = [
        {"id": 0, "name": "alpha", "attributes": ["circle", "solid", "dim"], "partition": "seen"},
        {"id": 1, "name": "beta", "attributes": ["square", "solid", "bright"], "partition": "seen",
         "region": [0.2, 0.2, 0.5, 0.5]},
        {"id": 2, "name": "gamma", "attributes": ["circle", "solid", "bright"], "partition": "test-novel"},
    ]
    path = tmp_path / "classes.json"
    path.write_text(json.dumps({"classes": classes}))
    cat, recipes = load_class_file(str(path))
    assert cat.names == ["alpha", "beta", "gamma"]
    assert recipes[1].region == (0.2, 0.2, 0.5, 0.5)
    manifest = generate_corpus(cat, RenderParams(image_size=64), 4, str(tmp_path / "out"), recipes)
    cat2, cases, _ = load_manifest(manifest)
    assert cat2 == cat and len(cases) == 4


def test_attribute_inventory_covers_all_visual_effects():
    kinds = {a.kind for a in ATTRIBUTES.values()}
    assert kinds == {"shape", "texture", "intensity", "halo"}
    validate_recipes({})
