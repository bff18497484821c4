import base64
import json

import numpy as np
import pytest

from glied.data import (
    COLORS,
    NOUNS,
    REFERENCE_STYLES,
    RELATIONS,
    SIZES,
    SYNTH_D_R,
    SceneObject,
    SceneSpec,
    build_vocab,
    collate,
    feature_tables,
    file_fingerprint,
    grammar_vocabulary,
    load_dataset,
    make_example,
    parse_caption,
    scene_regions,
    structured_score,
    synth_generate,
    truncate_attributes,
    write_dataset,
)
from glied.model import BOS, EOS, PAD, UNK


class TestVocabulary:
    def test_threshold_boundary(self):
        v = build_vocab(["a red dog"] * 5)
        assert all(w in v for w in ("a", "red", "dog"))

    def test_rare_word_is_unk(self):
        v = build_vocab(["a dog"] * 5 + ["a cat"] * 4)
        assert "cat" not in v
        assert v.encode(["cat"]) == [UNK]

    def test_reserved_ids(self):
        v = build_vocab(["x"] * 5)
        assert v.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)

    def test_order_count_then_spelling(self):
        v = build_vocab(["b a", "b c", "b a"], min_count=1)
        assert v.itos[4:] == ["b", "a", "c"]

    def test_deterministic_and_bijective(self):
        caps = ["the dog", "a cat on the mat", "the the dog"] * 5
        a, b = build_vocab(caps), build_vocab(caps)
        assert a.itos == b.itos
        assert all(a.stoi[w] == i for i, w in enumerate(a.itos))

    def test_caption_encoding(self):
        v = build_vocab(["a dog"] * 5)
        ids = v.encode_caption("A dog!")
        assert ids[0] == BOS and ids[-1] == EOS
        assert v.decode(ids) == ["a", "dog"]

    def test_empty(self):
        with pytest.raises(ValueError):
            build_vocab([])


class TestTruncation:
    def test_keeps_top_scores(self):
        ids, scores = truncate_attributes([10, 11, 12, 13, 14, 15, 16], [0.1, 0.9, 0.5, 0.7, 0.2, 0.3, 0.8], 3)
        assert ids == [11, 16, 13]
        assert scores == [0.9, 0.8, 0.7]

    def test_tie_keeps_lower_id(self):
        ids, _ = truncate_attributes([9, 5, 7], [0.5, 0.5, 0.5], 2)
        assert ids == [5, 7]

    def test_regions_untouched(self):
        v = grammar_vocabulary()
        regions = np.arange(6.0).reshape(2, 3)
        ex = make_example("x", regions, ["dog", "cat", "red"], [0.1, 0.9, 0.5], ["a red dog"], v)
        assert ex.attributes == [v.stoi["cat"], v.stoi["red"]]
        assert ex.regions is regions


class TestDatasetIO:
    def test_round_trip(self, tmp_path, synth_small):
        path = tmp_path / "d.jsonl"
        write_dataset(path, synth_small.train, synth_small.vocab)
        loaded, report = load_dataset(path, synth_small.vocab)
        assert report.loaded == len(synth_small.train) and report.rejected == 0
        for a, b in zip(synth_small.train, loaded):
            assert a.image_id == b.image_id
            np.testing.assert_array_equal(a.regions, b.regions)
            assert a.attributes == b.attributes
            assert a.captions == b.captions and a.caption_ids == b.caption_ids

    def test_record_errors_are_tallied(self, tmp_path, synth_small):
        path = tmp_path / "d.jsonl"
        write_dataset(path, synth_small.train[:3], synth_small.vocab)
        lines = path.read_text().splitlines()
        bad = [json.loads(line) for line in lines]
        bad[0]["d_r"] = 10
        bad[1]["captions"] = []
        bad[2]["attributes"] = [{"word": "zebra", "score": 0.9}]
        path.write_text("\n".join(lines + [json.dumps(r) for r in bad]) + "\n")
        loaded, report = load_dataset(path, synth_small.vocab)
        assert report.loaded == 3 and report.rejected == 3
        assert dict(report.errors) == {"feature_dim_mismatch": 1, "missing_references": 1, "no_known_attributes": 1}
        assert report.dropped_attributes == 1

    def test_attributes_truncated_on_load(self, tmp_path):
        v = grammar_vocabulary()
        rec = {"image_id": "i", "k": 3, "d_r": 2, "regions": "",
               "attributes": [{"word": w, "score": s} for w, s in
                              zip(["dog", "cat", "red", "blue", "small", "large", "tree"],
                                  [0.1, 0.9, 0.5, 0.7, 0.2, 0.3, 0.8])],
               "captions": ["a red dog"]}
        rec["regions"] = base64.b64encode(np.zeros(6, "<f4").tobytes()).decode()
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        (ex,), _ = load_dataset(path, v)
        assert [v.itos[i] for i in ex.attributes] == ["cat", "tree", "blue"]

    def test_fingerprint(self, tmp_path):
        a = tmp_path / "a"
        a.write_text("hello")
        b = tmp_path / "b"
        b.write_text("hello")
        assert file_fingerprint(a) == file_fingerprint(b)
        b.write_text("hellp")
        assert file_fingerprint(a) != file_fingerprint(b)


class TestCollate:
    def test_padding(self, synth_small):
        exs = synth_small.train[:4]
        batch = collate(exs, [ex.caption_ids[0] for ex in exs])
        for i, ex in enumerate(exs):
            assert batch.region_mask[i].sum() == ex.k
            assert (batch.regions[i, ex.k:] == 0).all()
            assert batch.attr_mask[i].sum() == len(ex.attributes)
            assert batch.tokens[i, len(ex.caption_ids[0]):].tolist() == [PAD] * (batch.tokens.shape[1] - len(ex.caption_ids[0]))
        assert (batch.inputs[:, 0] == BOS).all()


class TestSynth:
    def test_deterministic(self):
        a, b = synth_generate(3, 30, 5, 5), synth_generate(3, 30, 5, 5)
        for x, y in zip(a.train + a.val + a.test, b.train + b.val + b.test):
            np.testing.assert_array_equal(x.regions, y.regions)
            assert x.attributes == y.attributes and x.captions == y.captions
        assert synth_generate(4, 30, 5, 5).train[0].captions != a.train[0].captions or \
            not np.array_equal(synth_generate(4, 30, 5, 5).train[0].regions, a.train[0].regions)

    def test_noise_free_regions_equal_embeddings(self):
        ds = synth_generate(5, 20, 0, 0, noise_sigma=0.0)
        t_emb, c_emb, s_emb = feature_tables()
        for ex in ds.train:
            scene = ds.scenes[ex.image_id]
            expected = []
            for o in scene.objects:
                prop = (t_emb[o.type] + c_emb[o.color] + s_emb[o.size]).astype(np.float32)
                expected += [prop] * o.count
            got = ex.regions[:, :len(t_emb[0])].astype(np.float32)
            assert sorted(map(bytes, got)) == sorted(map(bytes, expected))

    def test_region_shape_and_count(self, synth_small):
        for ex in synth_small.train:
            scene = synth_small.scenes[ex.image_id]
            assert ex.regions.shape == (sum(o.count for o in scene.objects), SYNTH_D_R)
            assert len(ex.attributes) <= ex.k
            assert len(ex.captions) == len(REFERENCE_STYLES)

    def test_splits_disjoint(self):
        ds = synth_generate(1, 300, 50, 50)
        specs = {name: {ds.scenes[e.image_id] for e in ds.split(name)} for name in ("train", "val", "test")}
        assert not specs["train"] & specs["val"]
        assert not specs["train"] & specs["test"]
        assert not specs["val"] & specs["test"]
        assert len(specs["train"]) == 300

    def test_references_score_perfectly(self, synth_small):
        exs = synth_small.train
        scenes = [synth_small.scenes[e.image_id] for e in exs]
        for style in range(len(REFERENCE_STYLES)):
            caps = [e.captions[style] for e in exs]
            score = structured_score(caps, scenes)
            assert all(score[c] == 1.0 for c in ("objects", "attributes", "relations", "count"))
            assert score["unparseable"] == 0

    def test_vocabulary_covers_captions(self, synth_small):
        for ex in synth_small.train:
            for ids in ex.caption_ids:
                assert UNK not in ids

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            synth_generate(0, -1, 1, 1)
        with pytest.raises(ValueError):
            synth_generate(0, 1, 1, 1, noise_sigma=-0.1)

    def test_scene_validation(self):
        with pytest.raises(ValueError):
            SceneSpec((SceneObject(0, 0, 0, 1),), (0,))
        with pytest.raises(ValueError):
            SceneSpec((SceneObject(0, 0, 0, 5),), ())


def obj(noun, color, size, count):
    return SceneObject(NOUNS.index(noun), COLORS.index(color), SIZES.index(size), count)


def rel(word):
    return [r[0] for r in RELATIONS].index(word)


class TestStructuredScore:
    def test_caption_round_trip(self):
        scene = SceneSpec((obj("cat", "blue", "large", 2), obj("bird", "green", "medium", 1)), (rel("beside"),))
        assert scene.caption(0) == "two large blue cats next to a medium green bird"
        assert parse_caption(scene.caption(1).split()) == (list(scene.objects), list(scene.relations))

    def test_wrong_color_only(self):
        scene = SceneSpec((obj("dog", "red", "small", 1),), ())
        s = structured_score(["a small blue dog"], [scene])
        assert s["attributes"] == 0.0
        assert s["objects"] == s["count"] == 1.0

    def test_five_scene_hand_scored(self):
        scenes = [
            SceneSpec((obj("dog", "red", "small", 1),), ()),
            SceneSpec((obj("cat", "blue", "large", 2), obj("bird", "green", "medium", 1)), (rel("beside"),)),
            SceneSpec((obj("dog", "white", "small", 3),), ()),
            SceneSpec((obj("car", "black", "small", 1), obj("tree", "green", "large", 1)), (rel("above"),)),
            SceneSpec((obj("horse", "yellow", "medium", 4),), ()),
        ]
        captions = [
            "a small red dog",                                  # all hit
            "two large blue cats next to a medium red bird",    # second color wrong
            "two small white dogs",                             # count wrong
            "a small black car under a large green tree",       # relation wrong
            "horses are nice",                                  # unparseable
        ]
        # slots: objects/attributes/count 1+2+1+2+1 = 7, relations 0+1+0+1+0 = 2
        # objects 1+2+1+2+0, attributes 1+1+1+2+0, count 1+2+0+2+0, relations 1+0
        s = structured_score(captions, scenes)
        assert s == {"objects": 6 / 7, "attributes": 5 / 7, "relations": 1 / 2, "count": 5 / 7, "unparseable": 1}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            structured_score(["a small red dog"], [])

    def test_regions_shuffled(self):
        scene = SceneSpec((obj("cat", "blue", "large", 3), obj("bird", "green", "medium", 1)), (rel("near"),))
        orders = {bytes(scene_regions(scene, np.random.default_rng(s), 0.0)[0]) for s in range(10)}
        assert len(orders) > 1
