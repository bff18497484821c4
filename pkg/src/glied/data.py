"""Vocabulary, dataset ingestion, batching, and the synthetic scene grammar.

Dataset files are JSON lines, one image per line::

    {"image_id": "...", "k": 3, "d_r": 64,
     "regions": "<base64 little-endian float32, k*d_r values>",
     "attributes": [{"word": "dog", "score": 0.93}, ...],
     "captions": ["two small red dogs beside a cat", ...]}
"""
from __future__ import annotations

import base64
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .metrics import tokenize
from .model import BOS, EOS, PAD, UNK

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    def __init__(self, words: Sequence[str], min_count: int = 1):
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary words must be unique")
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def encode_caption(self, text: str) -> list[int]:
        return [BOS] + self.encode(tokenize(text)) + [EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD, BOS, EOS)]

    def to_dict(self) -> dict:
        return {"words": self.itos[len(SPECIALS):], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], d.get("min_count", 1))


def build_vocab(captions: Iterable[str | Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Words seen at least ``min_count`` times, ordered by count then spelling."""
    counts: Counter = Counter()
    n = 0
    for cap in captions:
        counts.update(tokenize(cap) if isinstance(cap, str) else cap)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from no captions")
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(kept, min_count)


@dataclass
class CaptioningExample:
    image_id: str
    regions: np.ndarray                     # (k, d_r)
    attributes: list[int]                   # vocabulary ids, at most k
    attr_scores: list[float]
    captions: list[str]
    caption_ids: list[list[int]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.regions.shape[0]

    @property
    def references(self) -> list[list[str]]:
        return [tokenize(c) for c in self.captions]


def truncate_attributes(ids: Sequence[int], scores: Sequence[float], k: int) -> tuple[list[int], list[float]]:
    """Keep the ``k`` best-scored attributes; equal scores keep the lower id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
    return [int(ids[i]) for i in order], [float(scores[i]) for i in order]


def make_example(image_id: str, regions: np.ndarray, attr_words: Sequence[str],
                 attr_scores: Sequence[float], captions: Sequence[str], vocab: Vocabulary) -> CaptioningExample:
    ids = [vocab.stoi[w] for w in attr_words]
    ids, scores = truncate_attributes(ids, attr_scores, regions.shape[0])
    return CaptioningExample(image_id, regions, ids, scores, list(captions),
                             [vocab.encode_caption(c) for c in captions])


# ---------------------------------------------------------------------------
# JSONL I/O


def encode_regions(regions: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(regions, dtype="<f4").tobytes()).decode("ascii")


def decode_regions(blob: str, k: int, d_r: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(blob), dtype="<f4")
    if raw.size != k * d_r:
        raise ValueError(f"region payload has {raw.size} values, expected {k}x{d_r}")
    return raw.reshape(k, d_r).astype(np.float64)


def write_dataset(path, examples: Sequence[CaptioningExample], vocab: Vocabulary) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            rec = {
                "image_id": ex.image_id,
                "k": ex.k,
                "d_r": int(ex.regions.shape[1]),
                "regions": encode_regions(ex.regions),
                "attributes": [{"word": vocab.itos[i], "score": s} for i, s in zip(ex.attributes, ex.attr_scores)],
                "captions": ex.captions,
            }
            fh.write(json.dumps(rec) + "\n")


@dataclass
class LoadReport:
    loaded: int = 0
    rejected: int = 0
    errors: Counter = field(default_factory=Counter)
    dropped_attributes: int = 0

    def to_dict(self) -> dict:
        return {"loaded": self.loaded, "rejected": self.rejected, "errors": dict(self.errors),
                "dropped_attributes": self.dropped_attributes}


def load_dataset(path, vocab: Vocabulary, d_r: int | None = None) -> tuple[list[CaptioningExample], LoadReport]:
    """Read a dataset file.  Bad records are skipped and tallied in the report.

    Attribute words missing from ``vocab`` are dropped (and counted); a record
    left with no attributes is rejected.
    """
    report = LoadReport()
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                k, width = int(rec["k"]), int(rec["d_r"])
                if d_r is not None and width != d_r:
                    raise _RecordError("feature_dim_mismatch")
                if d_r is None:
                    d_r = width
                try:
                    regions = decode_regions(rec["regions"], k, width)
                except ValueError:
                    raise _RecordError("feature_dim_mismatch") from None
                if k < 1:
                    raise _RecordError("no_regions")
                caps = [c for c in rec.get("captions", []) if tokenize(c)]
                if not caps:
                    raise _RecordError("missing_references")
                words, scores = [], []
                for a in rec.get("attributes", []):
                    if a["word"] in vocab:
                        words.append(a["word"])
                        scores.append(float(a["score"]))
                    else:
                        report.dropped_attributes += 1
                if not words:
                    raise _RecordError("no_known_attributes")
            except _RecordError as err:
                report.rejected += 1
                report.errors[str(err)] += 1
                continue
            out.append(make_example(str(rec["image_id"]), regions, words, scores, caps, vocab))
            report.loaded += 1
    return out, report


class _RecordError(Exception):
    pass


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    regions: np.ndarray        # (B, k, d_r)
    region_mask: np.ndarray    # (B, k)
    attributes: np.ndarray     # (B, ka)
    attr_mask: np.ndarray      # (B, ka)
    tokens: np.ndarray | None = None   # (B, T+1) BOS ... EOS, PAD-filled
    image_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.regions.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]


def collate(examples: Sequence[CaptioningExample], captions: Sequence[list[int]] | None = None) -> Batch:
    b = len(examples)
    k = max(ex.k for ex in examples)
    ka = max(len(ex.attributes) for ex in examples)
    d_r = examples[0].regions.shape[1]
    regions = np.zeros((b, k, d_r))
    rmask = np.zeros((b, k), bool)
    attrs = np.full((b, ka), PAD, dtype=np.int64)
    amask = np.zeros((b, ka), bool)
    for i, ex in enumerate(examples):
        regions[i, :ex.k] = ex.regions
        rmask[i, :ex.k] = True
        attrs[i, :len(ex.attributes)] = ex.attributes
        amask[i, :len(ex.attributes)] = True
    tokens = None
    if captions is not None:
        t = max(len(c) for c in captions)
        tokens = np.full((b, t), PAD, dtype=np.int64)
        for i, c in enumerate(captions):
            tokens[i, :len(c)] = c
    return Batch(regions, rmask, attrs, amask, tokens, [ex.image_id for ex in examples])


# ---------------------------------------------------------------------------
# synthetic scene grammar

NOUNS = ("dog", "cat", "bird", "horse", "car", "bus", "ball", "cup", "chair", "table", "tree", "boat")
PLURALS = ("dogs", "cats", "birds", "horses", "cars", "buses", "balls", "cups", "chairs", "tables", "trees", "boats")
COLORS = ("red", "blue", "green", "yellow", "black", "white")
SIZES = ("small", "medium", "large")
COUNT_WORDS = {2: "two", 3: "three", 4: "four"}
SINGLE_WORDS = ("a", "one")
# (attribute word, caption phrasings)
RELATIONS = (
    ("beside", ("next to", "beside")),
    ("above", ("above", "over")),
    ("below", ("below", "under")),
    ("behind", ("behind", "in back of")),
    ("near", ("near", "close to")),
)
REFERENCE_STYLES = ((0, "a"), (1, "one"), (1, "a"))   # (phrasing index, word for a count of one)
PROPERTY_DIM = 55
MAX_OBJECTS = 4
MAX_COUNT = 4
FEATURE_TABLE_SEED = 20190801


@dataclass(frozen=True)
class SceneObject:
    type: int
    color: int
    size: int
    count: int


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    relations: tuple[int, ...]        # relations[i] links objects i and i + 1

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError("a scene holds 1-4 objects")
        if len(self.relations) != len(self.objects) - 1:
            raise ValueError("relations link adjacent objects only")
        if any(not 1 <= o.count <= MAX_COUNT for o in self.objects):
            raise ValueError("object counts must be in 1..4")

    def caption(self, style: int = 0) -> str:
        phrasing, one = REFERENCE_STYLES[style]
        parts = []
        for i, o in enumerate(self.objects):
            count = one if o.count == 1 else COUNT_WORDS[o.count]
            noun = NOUNS[o.type] if o.count == 1 else PLURALS[o.type]
            parts.append(f"{count} {SIZES[o.size]} {COLORS[o.color]} {noun}")
            if i < len(self.relations):
                parts.append(RELATIONS[self.relations[i]][1][phrasing])
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {"objects": [[o.type, o.color, o.size, o.count] for o in self.objects],
                "relations": list(self.relations)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(SceneObject(*o) for o in d["objects"]), tuple(d["relations"]))


def grammar_words() -> list[str]:
    words = list(SINGLE_WORDS) + list(COUNT_WORDS.values()) + list(SIZES) + list(COLORS) + list(NOUNS) + list(PLURALS)
    for attr, phrasings in RELATIONS:
        words.append(attr)
        for p in phrasings:
            words.extend(p.split())
    seen = []
    for w in words:
        if w not in seen:
            seen.append(w)
    return seen


def grammar_vocabulary() -> Vocabulary:
    return Vocabulary(grammar_words())


def attribute_lexicon() -> list[str]:
    return list(NOUNS) + list(COLORS) + list(SIZES) + [r[0] for r in RELATIONS]


def feature_tables(seed: int = FEATURE_TABLE_SEED) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(PROPERTY_DIM)
    return (rng.normal(0, 1, (len(NOUNS), PROPERTY_DIM)) * scale * 2,
            rng.normal(0, 1, (len(COLORS), PROPERTY_DIM)) * scale * 2,
            rng.normal(0, 1, (len(SIZES), PROPERTY_DIM)) * scale * 2)


SYNTH_D_R = PROPERTY_DIM + MAX_COUNT + len(RELATIONS)


def scene_regions(scene: SceneSpec, rng: np.random.Generator, noise_sigma: float,
                  tables=None) -> np.ndarray:
    """One region per object instance: property embedding | instance ordinal | outgoing relation.

    Rows are shuffled, so the caption order is never visible in the layout.
    """
    t_emb, c_emb, s_emb = tables if tables is not None else feature_tables()
    rows = []
    for i, o in enumerate(scene.objects):
        prop = t_emb[o.type] + c_emb[o.color] + s_emb[o.size]
        rel = np.zeros(len(RELATIONS))
        if i < len(scene.relations):
            rel[scene.relations[i]] = 1.0
        for j in range(o.count):
            ordinal = np.zeros(MAX_COUNT)
            ordinal[j] = 1.0
            rows.append(np.concatenate([prop, ordinal, rel]))
    regions = np.array(rows)
    regions = regions[rng.permutation(len(rows))]
    if noise_sigma > 0:
        regions = regions + rng.normal(0.0, noise_sigma, regions.shape)
    # float32-representable so the JSONL round trip is exact
    return regions.astype(np.float32).astype(np.float64)


def scene_attributes(scene: SceneSpec, rng: np.random.Generator, drop: float = 0.1,
                     distractor: float = 0.05) -> tuple[list[str], list[float]]:
    true_words = []
    for o in scene.objects:
        true_words += [NOUNS[o.type], COLORS[o.color], SIZES[o.size]]
    true_words += [RELATIONS[r][0] for r in scene.relations]
    words, scores = [], []
    lexicon = attribute_lexicon()
    for w in true_words:
        if rng.random() >= drop:
            words.append(w)
            scores.append(float(rng.uniform(0.5, 1.0)))
        if rng.random() < distractor:
            pool = [x for x in lexicon if x not in true_words]
            words.append(pool[int(rng.integers(len(pool)))])
            scores.append(float(rng.uniform(0.0, 0.7)))
    if not words:
        words.append(true_words[0])
        scores.append(float(rng.uniform(0.5, 1.0)))
    return words, scores


def random_scene(rng: np.random.Generator) -> SceneSpec:
    n = int(rng.choice([1, 2, 3, 4], p=[0.25, 0.35, 0.25, 0.15]))
    types = sorted(rng.choice(len(NOUNS), size=n, replace=False).tolist())
    objects = tuple(
        SceneObject(int(t), int(rng.integers(len(COLORS))), int(rng.integers(len(SIZES))), int(rng.integers(1, MAX_COUNT + 1)))
        for t in types
    )
    relations = tuple(int(rng.integers(len(RELATIONS))) for _ in range(n - 1))
    return SceneSpec(objects, relations)


@dataclass
class SynthDataset:
    train: list[CaptioningExample]
    val: list[CaptioningExample]
    test: list[CaptioningExample]
    scenes: dict[str, SceneSpec]
    vocab: Vocabulary

    def split(self, name: str) -> list[CaptioningExample]:
        return getattr(self, name)


def synth_generate(seed: int, n_train: int = 2000, n_val: int = 200, n_test: int = 200,
                   noise_sigma: float = 0.1) -> SynthDataset:
    """Deterministic synthetic captioning data; scenes never repeat across or within splits."""
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test == 0:
        raise ValueError("split sizes must be non-negative and not all zero")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    vocab = grammar_vocabulary()
    tables = feature_tables()
    scene_rng, feat_rng, attr_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    seen: set[SceneSpec] = set()
    scenes: dict[str, SceneSpec] = {}
    splits = {}
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        examples = []
        while len(examples) < n:
            scene = random_scene(scene_rng)
            if scene in seen:
                continue
            seen.add(scene)
            image_id = f"{name}-{len(examples):05d}"
            regions = scene_regions(scene, feat_rng, noise_sigma, tables)
            words, scores = scene_attributes(scene, attr_rng)
            caps = [scene.caption(s) for s in range(len(REFERENCE_STYLES))]
            examples.append(make_example(image_id, regions, words, scores, caps, vocab))
            scenes[image_id] = scene
        splits[name] = examples
    return SynthDataset(splits["train"], splits["val"], splits["test"], scenes, vocab)


# ---------------------------------------------------------------------------
# structured scoring

_COUNT_LOOKUP = {w: 1 for w in SINGLE_WORDS} | {w: c for c, w in COUNT_WORDS.items()}
_NOUN_LOOKUP = {w: i for i, w in enumerate(NOUNS)} | {w: i for i, w in enumerate(PLURALS)}
_PHRASES = sorted(((p.split(), r) for r, (_, ps) in enumerate(RELATIONS) for p in ps), key=lambda x: -len(x[0]))


def parse_caption(tokens: Sequence[str]) -> tuple[list[SceneObject], list[int]] | None:
    """Inverse of :meth:`SceneSpec.caption`; None when the grammar does not match."""
    toks = list(tokens)
    objects, relations = [], []
    i = 0
    while True:
        if i + 4 > len(toks):
            return None
        c, s, col, noun = toks[i:i + 4]
        if c not in _COUNT_LOOKUP or s not in SIZES or col not in COLORS or noun not in _NOUN_LOOKUP:
            return None
        objects.append(SceneObject(_NOUN_LOOKUP[noun], COLORS.index(col), SIZES.index(s), _COUNT_LOOKUP[c]))
        i += 4
        if i == len(toks):
            return objects, relations
        for phrase, r in _PHRASES:
            if toks[i:i + len(phrase)] == phrase:
                relations.append(r)
                i += len(phrase)
                break
        else:
            return None


CATEGORIES = ("objects", "attributes", "relations", "count")


def structured_score(captions: Sequence[Sequence[str] | str], scenes: Sequence[SceneSpec]) -> dict:
    """Slot accuracy per category against ground-truth scenes.

    Slots: one object, one attribute pair (size and color together) and one
    count per ground-truth object, one per ground-truth relation; matched by
    position in canonical caption order.  Unparseable captions miss every slot.
    """
    if len(captions) != len(scenes):
        raise ValueError("need one caption per scene")
    hits = Counter()
    slots = Counter()
    unparseable = 0
    for cap, scene in zip(captions, scenes):
        toks = tokenize(cap) if isinstance(cap, str) else list(cap)
        parsed = parse_caption(toks)
        n_obj, n_rel = len(scene.objects), len(scene.relations)
        slots.update({"objects": n_obj, "attributes": n_obj, "count": n_obj, "relations": n_rel})
        if parsed is None:
            unparseable += 1
            continue
        objs, rels = parsed
        for gt, got in zip(scene.objects, objs):
            hits["objects"] += gt.type == got.type
            hits["attributes"] += gt.color == got.color and gt.size == got.size
            hits["count"] += gt.count == got.count
        for gt, got in zip(scene.relations, rels):
            hits["relations"] += gt == got
    out = {c: (hits[c] / slots[c] if slots[c] else 1.0) for c in CATEGORIES}
    out["unparseable"] = unparseable
    return out
