"""Core record types, manifest I/O, tokenization and the seen/novel protocol."""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

SEEN = "seen"
VAL_NOVEL = "validation-novel"
TEST_NOVEL = "test-novel"
PARTITIONS = (SEEN, VAL_NOVEL, TEST_NOVEL)

TEST_SEEN, TEST_NOVEL_SETTING, TEST_MIX = "test-seen", "test-novel", "test-mix"
SETTINGS = (TEST_SEEN, TEST_NOVEL_SETTING, TEST_MIX)


class ManifestError(ValueError):
    """Raised for malformed manifests and violated data invariants."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def scale(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)


@dataclass(frozen=True)
class LesionAnnotation:
    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    annotations: tuple[LesionAnnotation, ...] = ()
    # directory the relative `path` is resolved against; not serialized
    root: str = field(default="", compare=False, repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: width and height must be positive")

    @property
    def resolved_path(self) -> str:
        return os.path.join(self.root, self.path) if self.root else self.path

    @property
    def class_ids(self) -> frozenset[int]:
        return frozenset(a.class_id for a in self.annotations)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) < 2 or self.tokens[0] != BOS or self.tokens[-1] != EOS:
            raise ValueError("token sequence must start with BOS and end with EOS")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Case:
    case_id: str
    images: tuple[ImageRecord, ...]
    report_text: str
    report: TokenSequence

    def __post_init__(self):
        if not self.images:
            raise ValueError(f"case {self.case_id} has no images")

    @property
    def case_classes(self) -> frozenset[int]:
        return frozenset().union(*(im.class_ids for im in self.images))


class Vocabulary:
    """Token <-> index bijection; indices 0..3 are PAD, BOS, EOS, UNK."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED_TOKENS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for t in texts:
            words.update(split_words(t))
        return cls(sorted(words))

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def index(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def word(self, index: int) -> str:
        return self.itos[index]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    attributes: tuple[str, ...]
    partition: str


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ManifestError("class ids must be 0..|C|-1 in order")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ManifestError("class names must be unique")
        for c in self.classes:
            if c.partition not in PARTITIONS:
                raise ManifestError(f"class {c.name}: unknown partition {c.partition!r}")

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, class_id: int) -> ClassInfo:
        return self.classes[class_id]

    def ids(self, partition: str) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes if c.partition == partition)

    @property
    def seen_ids(self) -> tuple[int, ...]:
        return self.ids(SEEN)

    @property
    def novel_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes if c.partition != SEEN)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def active_ids(self, setting: str, novel_partition: str = TEST_NOVEL) -> tuple[int, ...]:
        """Label space of a test setting."""
        if setting == TEST_SEEN:
            return self.seen_ids
        if setting == TEST_NOVEL_SETTING:
            return self.ids(novel_partition)
        if setting == TEST_MIX:
            return tuple(sorted(self.seen_ids + self.ids(novel_partition)))
        raise ValueError(f"unknown setting {setting!r}")


@dataclass(frozen=True)
class EpisodeSpec:
    K: int = 5
    setting: str = TEST_NOVEL_SETTING
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")


@dataclass(frozen=True)
class SupportItem:
    image: ImageRecord
    case_id: str
    class_id: int
    boxes: tuple[BoundingBox, ...]


@dataclass(frozen=True)
class SupportSet:
    items: tuple[SupportItem, ...]

    def by_class(self) -> dict[int, list[SupportItem]]:
        out: dict[int, list[SupportItem]] = {}
        for it in self.items:
            out.setdefault(it.class_id, []).append(it)
        return out

    @property
    def image_ids(self) -> frozenset[str]:
        return frozenset(it.image.image_id for it in self.items)


@dataclass(frozen=True)
class QuerySet:
    cases: tuple[Case, ...]

    @property
    def image_ids(self) -> frozenset[str]:
        return frozenset(im.image_id for c in self.cases for im in c.images)


# -- tokenization -----------------------------------------------------------

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence((BOS, *(vocab.index(w) for w in split_words(text)), EOS))


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    words = [vocab.word(t) for t in tokens if t not in (PAD, BOS, EOS)]
    return join_words(words)


def join_words(words: Sequence[str]) -> str:
    out = ""
    for w in words:
        if out and not _is_punct(w):
            out += " "
        out += w
    return out


def _is_punct(word: str) -> bool:
    return re.fullmatch(r"[^\w\s]", word) is not None


def surface_tokens(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> list[str]:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    return [vocab.word(t) for t in tokens if t not in (PAD, BOS, EOS)]


# -- manifest ---------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestError(f"{where}: missing field {key!r}")
    return obj[key]


def parse_catalog(classes: list) -> ClassCatalog:
    out = []
    for i, c in enumerate(classes):
        where = f"classes[{i}]"
        out.append(ClassInfo(
            class_id=int(_require(c, "id", where)),
            name=str(_require(c, "name", where)),
            attributes=tuple(_require(c, "attributes", where)),
            partition=str(_require(c, "partition", where)),
        ))
    return ClassCatalog(tuple(out))


def load_manifest(path: str) -> tuple[ClassCatalog, list[Case], Vocabulary]:
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    catalog = parse_catalog(_require(doc, "classes", "manifest"))
    raw_cases = _require(doc, "cases", "manifest")
    if not raw_cases:
        raise ManifestError("manifest contains no cases")
    vocab = Vocabulary.build(str(_require(c, "report", f"cases[{i}]")) for i, c in enumerate(raw_cases))
    cases = [_parse_case(c, i, catalog, vocab, root) for i, c in enumerate(raw_cases)]
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate case ids")
    return catalog, cases, vocab


def _parse_case(raw: dict, i: int, catalog: ClassCatalog, vocab: Vocabulary, root: str) -> Case:
    where = f"cases[{i}]"
    case_id = str(_require(raw, "case_id", where))
    images = []
    for j, im in enumerate(_require(raw, "images", where)):
        iw = f"case {case_id} images[{j}]"
        width, height = int(_require(im, "width", iw)), int(_require(im, "height", iw))
        anns = []
        for k, b in enumerate(_require(im, "boxes", iw)):
            bw = f"{iw} boxes[{k}]"
            cid = int(_require(b, "class_id", bw))
            if not 0 <= cid < len(catalog):
                raise ManifestError(f"{bw}: class_id {cid} outside catalog")
            try:
                box = BoundingBox(*(float(_require(b, key, bw)) for key in ("x_min", "y_min", "x_max", "y_max")))
            except ValueError as e:
                raise ManifestError(f"{bw}: {e}") from e
            if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
                raise ManifestError(f"{bw}: box outside image bounds")
            anns.append(LesionAnnotation(box, cid))
        try:
            images.append(ImageRecord(
                image_id=str(im.get("image_id", f"{case_id}/{j}")),
                path=str(_require(im, "path", iw)), width=width, height=height,
                annotations=tuple(anns), root=root,
            ))
        except ValueError as e:
            raise ManifestError(f"{iw}: {e}") from e
    if not images:
        raise ManifestError(f"case {case_id}: no images")
    text = str(raw["report"])
    return Case(case_id, tuple(images), text, tokenize(text, vocab))


def catalog_to_json(catalog: ClassCatalog) -> list[dict]:
    return [
        {"id": c.class_id, "name": c.name, "attributes": list(c.attributes), "partition": c.partition}
        for c in catalog.classes
    ]


def manifest_to_json(catalog: ClassCatalog, cases: Sequence[Case]) -> dict:
    return {
        "classes": catalog_to_json(catalog),
        "cases": [
            {
                "case_id": c.case_id,
                "report": c.report_text,
                "images": [
                    {
                        "image_id": im.image_id,
                        "path": im.path,
                        "width": im.width,
                        "height": im.height,
                        "boxes": [
                            dict(zip(("x_min", "y_min", "x_max", "y_max"), a.box.as_tuple()), class_id=a.class_id)
                            for a in im.annotations
                        ],
                    }
                    for im in c.images
                ],
            }
            for c in cases
        ],
    }


def save_manifest(path: str, catalog: ClassCatalog, cases: Sequence[Case]) -> None:
    with open(path, "w") as fh:
        json.dump(manifest_to_json(catalog, cases), fh, indent=1)
        fh.write("\n")


# -- protocol ---------------------------------------------------------------

def _with_images(case: Case, images: Sequence[ImageRecord]) -> Case:
    return replace(case, images=tuple(images))


def make_splits(
    catalog: ClassCatalog,
    cases: Sequence[Case],
    seen_holdout: float = 0.2,
    novel_holdout: float = 1.0,
    seed: int = 0,
) -> tuple[list[Case], list[Case], list[Case]]:
    """Partition cases into (train, val, test).

    A case touching a test-novel (resp. validation-novel) class goes to test
    (resp. val) with probability ``novel_holdout``; seen-only cases go to the
    test pool with probability ``seen_holdout`` to serve the Test-Seen setting.
    Every other case is a training case and loses each image that carries a
    novel-class lesion; training cases left without images are dropped.
    """
    rng = np.random.default_rng(seed)
    test_ids, val_ids = set(catalog.ids(TEST_NOVEL)), set(catalog.ids(VAL_NOVEL))
    novel = test_ids | val_ids
    train, val, test = [], [], []
    for case in cases:
        draw = rng.random()
        classes = case.case_classes
        if classes & test_ids and draw < novel_holdout:
            test.append(case)
        elif classes & val_ids and draw < novel_holdout:
            val.append(case)
        elif not classes & novel and draw < seen_holdout:
            test.append(case)
        else:
            kept = [im for im in case.images if not im.class_ids & novel]
            if kept:
                train.append(_with_images(case, kept))
    counts = {c: 0 for c in catalog.seen_ids}
    for case in train:
        for im in case.images:
            for a in im.annotations:
                counts[a.class_id] += 1
    for cid, n in counts.items():
        if n == 0:
            raise ManifestError(f"class {catalog[cid].name!r} has no training support")
    return train, val, test


def sample_episode(
    spec: EpisodeSpec,
    test_cases: Sequence[Case],
    catalog: ClassCatalog,
    novel_partition: str = TEST_NOVEL,
) -> tuple[SupportSet, QuerySet]:
    """Draw K box-annotated support images per novel class; the rest is the query set."""
    rng = np.random.default_rng(spec.seed)
    used: set[str] = set()
    items = []
    for cid in catalog.ids(novel_partition):
        pool = [
            (case, im) for case in test_cases for im in case.images
            if cid in im.class_ids and im.image_id not in used
        ]
        if len(pool) < spec.K:
            raise ValueError(
                f"class {catalog[cid].name!r} has {len(pool)} annotated images, fewer than K={spec.K}"
            )
        for idx in sorted(rng.choice(len(pool), size=spec.K, replace=False)):
            case, im = pool[idx]
            used.add(im.image_id)
            boxes = tuple(a.box for a in im.annotations if a.class_id == cid)
            items.append(SupportItem(im, case.case_id, cid, boxes))
    query = []
    for case in test_cases:
        kept = [im for im in case.images if im.image_id not in used]
        if kept:
            query.append(_with_images(case, kept))
    return SupportSet(tuple(items)), QuerySet(tuple(query))


def filter_setting(
    cases: Sequence[Case], catalog: ClassCatalog, setting: str, novel_partition: str = TEST_NOVEL
) -> list[Case]:
    """Query cases belonging to a test setting.

    Test-Seen keeps cases whose lesions are all seen, Test-Novel cases whose
    lesions all belong to the novel partition, and Test-Mix every case whose
    lesions fall inside seen plus that partition.
    """
    allowed = set(catalog.active_ids(setting, novel_partition))
    return [c for c in cases if c.case_classes and c.case_classes <= allowed]
