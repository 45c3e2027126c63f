import json
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionrg.datamodel import (
    BOS, EOS, UNK, BoundingBox, Case, ClassCatalog, ClassInfo, EpisodeSpec, ImageRecord, LesionAnnotation,
    ManifestError, TokenSequence, Vocabulary, detokenize, filter_setting, load_manifest, make_splits,
    manifest_to_json, sample_episode, save_manifest, split_words, surface_tokens, tokenize,
)


def catalog(n_seen=2, n_novel=1):
    classes = [ClassInfo(i, f"s{i}", ("circle",), "seen") for i in range(n_seen)]
    classes += [ClassInfo(n_seen + i, f"n{i}", ("square",), "test-novel") for i in range(n_novel)]
    return ClassCatalog(tuple(classes))


def image(image_id, *class_ids):
    anns = tuple(LesionAnnotation(BoundingBox(1, 1, 9, 9), c) for c in class_ids)
    return ImageRecord(image_id, f"{image_id}.png", 64, 64, anns)


def case(case_id, *images):
    return Case(case_id, tuple(images), "a lesion.", TokenSequence((BOS, EOS)))


# -- records ------------------------------------------------------------------

def test_bounding_box_rejects_degenerate():
    with pytest.raises(ValueError):
        BoundingBox(5, 5, 5, 9)
    b = BoundingBox(0, 0, 4, 2)
    assert b.area == 8 and b.scale(2, 0.5).as_tuple() == (0, 0, 8, 1)
    assert BoundingBox(-2, 1, 70, 9).clamp(64, 64).as_tuple() == (0, 1, 64, 9)


def test_token_sequence_needs_bos_eos():
    with pytest.raises(ValueError):
        TokenSequence((BOS,))
    with pytest.raises(ValueError):
        TokenSequence((5, EOS))


def test_catalog_invariants():
    with pytest.raises(ManifestError):
        ClassCatalog((ClassInfo(1, "a", (), "seen"),))
    with pytest.raises(ManifestError):
        ClassCatalog((ClassInfo(0, "a", (), "seen"), ClassInfo(1, "a", (), "seen")))
    with pytest.raises(ManifestError):
        ClassCatalog((ClassInfo(0, "a", (), "other"),))
    cat = catalog()
    assert set(cat.seen_ids).isdisjoint(cat.novel_ids)
    assert cat.active_ids("test-seen") == (0, 1)
    assert cat.active_ids("test-novel") == (2,)
    assert cat.active_ids("test-mix") == (0, 1, 2)


# -- tokenization ---------------------------------------------------------------

def test_tokenize_roundtrip():
    vocab = Vocabulary.build(["A dim lesion is observed.", "a bright lesion."])
    seq = tokenize("a dim lesion is observed.", vocab)
    assert seq.tokens[0] == BOS and seq.tokens[-1] == EOS
    assert detokenize(seq, vocab) == "a dim lesion is observed."
    assert surface_tokens(seq, vocab) == ["a", "dim", "lesion", "is", "observed", "."]
    assert tokenize("unseen words", vocab).tokens[1:-1] == (UNK, UNK)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "dim", "lesion", "is", "observed", ".", ","]), min_size=1, max_size=12))
def test_tokenize_detokenize_is_identity_on_canonical_text(words):
    vocab = Vocabulary(["a", "dim", "lesion", "is", "observed", ".", ","])
    seq = TokenSequence((BOS, *(vocab.index(w) for w in words), EOS))
    text = detokenize(seq, vocab)
    assert split_words(text) == words
    assert tokenize(text, vocab) == seq


# -- manifest -----------------------------------------------------------------

def test_manifest_roundtrip(corpus, tmp_path):
    cat, cases, vocab = corpus
    path = tmp_path / "m.json"
    save_manifest(str(path), cat, cases)
    cat2, cases2, vocab2 = load_manifest(str(path))
    assert cat2 == cat and vocab2 == vocab
    assert manifest_to_json(cat2, cases2) == manifest_to_json(cat, cases)


def _write(tmp_path, doc):
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(doc))
    return str(p)


def _doc():
    return {
        "classes": [{"id": 0, "name": "a", "attributes": ["circle"], "partition": "seen"}],
        "cases": [{"case_id": "c0", "report": "x.", "images": [
            {"path": "i.png", "width": 32, "height": 32,
             "boxes": [{"x_min": 1, "y_min": 1, "x_max": 5, "y_max": 5, "class_id": 0}]}]}],
    }


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update(cases=[]), "no cases"),
    (lambda d: d["cases"][0].pop("report"), "missing field 'report'"),
    (lambda d: d["cases"][0]["images"][0]["boxes"][0].update(x_max=40), "outside image bounds"),
    (lambda d: d["cases"][0]["images"][0]["boxes"][0].update(class_id=3), "outside catalog"),
    (lambda d: d["cases"][0]["images"][0]["boxes"][0].update(x_max=1), "degenerate"),
    (lambda d: d["cases"].append(dict(d["cases"][0])), "duplicate case ids"),
])
def test_manifest_errors(tmp_path, mutate, message):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ManifestError, match=message):
        load_manifest(_write(tmp_path, doc))


def test_manifest_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ManifestError, match="invalid JSON"):
        load_manifest(str(p))


def test_manifest_paths_resolve_against_manifest_dir(corpus_dir, corpus):
    _, cases, _ = corpus
    path = cases[0].images[0].resolved_path
    assert os.path.isfile(path) and path.startswith(os.path.abspath(corpus_dir))


# -- protocol -----------------------------------------------------------------

def test_make_splits_strips_novel_images_from_training():
    cat = catalog()
    cases = [case(f"c{i}", image(f"c{i}/0", 0), image(f"c{i}/1", 2), image(f"c{i}/2", 1)) for i in range(5)]
    train, val, test = make_splits(cat, cases, seen_holdout=0.0, novel_holdout=0.0)
    assert len(train) == 5 and not val and not test
    for c in train:
        assert [im.image_id[-1] for im in c.images] == ["0", "2"]
        assert not c.case_classes & set(cat.novel_ids)


def test_make_splits_requires_training_support_for_each_seen_class():
    cat = catalog()
    cases = [case("c0", image("c0/0", 0))]
    with pytest.raises(ManifestError, match="no training support"):
        make_splits(cat, cases, seen_holdout=0.0)


def test_make_splits_default_routes_novel_cases_to_test(corpus):
    cat, cases, _ = corpus
    train, val, test = make_splits(cat, cases)
    ids = [c.case_id for c in train + val + test]
    assert len(ids) == len(set(ids))
    test_novel, val_novel = set(cat.ids("test-novel")), set(cat.ids("validation-novel"))
    assert all(c.case_classes & val_novel for c in val)
    assert all(not c.case_classes & set(cat.novel_ids) for c in train)
    assert any(c.case_classes & test_novel for c in test)


def test_sample_episode_twenty_images_gives_five_support_fifteen_query():
    cat = catalog(n_seen=1, n_novel=1)
    cases = [case(f"c{i}", image(f"c{i}/0", 1)) for i in range(20)]
    support, query = sample_episode(EpisodeSpec(5, "test-novel", 3), cases, cat)
    assert len(support.items) == 5 and len(query.cases) == 15
    assert support.image_ids.isdisjoint(query.image_ids)
    assert all(it.boxes and it.class_id == 1 for it in support.items)


def test_sample_episode_too_few_images():
    cat = catalog(n_seen=1, n_novel=1)
    cases = [case(f"c{i}", image(f"c{i}/0", 1)) for i in range(3)]
    with pytest.raises(ValueError, match="fewer than K=5"):
        sample_episode(EpisodeSpec(5), cases, cat)


def test_sample_episode_deterministic_in_seed(corpus):
    cat, cases, _ = corpus
    _, _, test = make_splits(cat, cases)
    a = sample_episode(EpisodeSpec(2, "test-novel", 7), test, cat)
    b = sample_episode(EpisodeSpec(2, "test-novel", 7), test, cat)
    assert a == b


def test_episode_spec_validation():
    with pytest.raises(ValueError):
        EpisodeSpec(0)
    with pytest.raises(ValueError):
        EpisodeSpec(5, "test-all")


def test_filter_setting():
    cat = catalog()
    cases = [case("s", image("s/0", 0)), case("n", image("n/0", 2)), case("m", image("m/0", 0), image("m/1", 2))]
    ids = lambda setting: [c.case_id for c in filter_setting(cases, cat, setting)]  # noqa: E731
    assert ids("test-seen") == ["s"]
    assert ids("test-novel") == ["n"]
    assert ids("test-mix") == ["s", "n", "m"]
