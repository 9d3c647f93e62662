"""World construction, rendering, corpus emission and QA items."""

import numpy as np
import pytest

from latefuse import world as W
from latefuse.errors import GenerationError
from latefuse.seeding import derive_seed

ATTR_WORDS = set(W.COLORS) | set(W.SHAPES) | set(W.SIZES)


def test_build_world_deterministic_and_covering():
    w1 = W.build_world(3, 64)
    w2 = W.build_world(3, 64)
    assert w1.objects == w2.objects
    assert w1.attributes == w2.attributes
    assert len(set(w1.objects)) == 64
    # 64 objects tile the 8x4x2 factorial exactly once
    bundles = {(a.color, a.shape, a.size) for a in w1.attributes}
    assert len(bundles) == 64
    for color in W.COLORS:
        assert sum(a.color == color for a in w1.attributes) == 8
    assert W.build_world(4, 64).objects != w1.objects


def test_build_world_rejects_tiny_worlds():
    with pytest.raises(ValueError, match="at least"):
        W.build_world(0, W.MIN_OBJECTS - 1)


def test_render_is_pure_and_faithful_at_zero_noise():
    attrs = W.Attributes("red", "disc", "large")
    a = W.render(attrs, 9, 0.0)
    b = W.render(attrs, 9, 0.0)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.drawn == attrs
    # the drawn color actually appears and nothing else does
    lit = a.pixels[(a.pixels != W.BACKGROUND).any(axis=2)]
    assert len(lit) > 0
    assert (lit == np.array(W.COLORS["red"])).all()
    c = W.render(attrs, 10, 0.0)
    assert not np.array_equal(a.pixels, c.pixels)  # jitter moves the shape


def test_render_noise_rate_monte_carlo():
    attrs = W.Attributes("blue", "square", "small")
    flips = {"color": 0, "shape": 0, "size": 0}
    n = 10_000
    for i in range(n):
        s = W.render(attrs, i, 0.25)
        for slot in flips:
            if getattr(s.drawn, slot) != getattr(attrs, slot):
                flips[slot] += 1
    for slot, count in flips.items():
        assert abs(count / n - 0.25) < 0.02, (slot, count / n)


def test_render_rejects_bad_noise_rate():
    with pytest.raises(ValueError, match="noise_rate"):
        W.render(W.Attributes("red", "bar", "small"), 0, 1.5)


def test_image_patches_shape_and_reassembly():
    s = W.render(W.Attributes("green", "square", "large"), 1, 0.0)
    patches = W.image_patches(s.pixels)
    assert patches.shape == (W.N_PATCHES, W.PATCH_SIDE * W.PATCH_SIDE * 3)
    # total colored mass survives the reshape
    assert np.isclose(patches.sum(), s.pixels.sum())
    with pytest.raises(ValueError, match="pixels"):
        W.image_patches(np.zeros((3, 3, 3)))


def test_write_ppm_bytes(tmp_path):
    s = W.render(W.Attributes("yellow", "triangle", "large"), 2, 0.0)
    p = tmp_path / "img.ppm"
    W.write_ppm(s, p)
    blob = p.read_bytes()
    assert blob.startswith(f"P6\n{W.IMG_SIDE} {W.IMG_SIDE}\n255\n".encode())
    header_len = len(f"P6\n{W.IMG_SIDE} {W.IMG_SIDE}\n255\n")
    assert len(blob) == header_len + W.IMG_SIDE * W.IMG_SIDE * 3


def test_caption_parse_round_trip():
    w = W.build_world(0, 64)
    for caption, name in W.make_captions(w):
        parsed = W.parse_prompt(caption, w)
        assert parsed is not None, caption
        truth = w.attributes_of(name).as_dict()
        for slot, value in parsed.items():
            if slot in truth:
                assert truth[slot] == value, caption


def test_expected_attributes_on_questions():
    w = W.build_world(0, 64)
    name = w.objects[0]
    truth = w.attributes_of(name)
    expected = W.expected_attributes(W.fill_template(W.COLOR_QUESTION, {"object": name}), w)
    assert expected is not None
    assert expected.get("color") == truth.color
    assert W.expected_attributes("entirely unrelated words", w) is None


def test_emit_corpora_heldout_leakage():
    w = W.build_world(0, 64)
    c = W.emit_corpora(w, 0.25, seed=derive_seed(0, "corpora"), epsilon=0.0)
    assert len(c.heldout_objects) == 16
    assert len(c.training_objects) == 48
    assert set(c.heldout_objects) & set(c.training_objects) == set()
    held = set(c.heldout_objects)
    mentioned = set()
    for line in c.lm_corpus:
        words = set(line.split())
        named = words & held
        mentioned |= named
        if named:
            # a held-out name may appear, but never next to an attribute word
            assert not words & ATTR_WORDS, line
    assert mentioned == held  # every held-out object is mentionable by name


def test_emit_corpora_pairs_match_truth_at_zero_epsilon():
    w = W.build_world(0, 64)
    c = W.emit_corpora(w, 0.25, seed=derive_seed(0, "corpora"), epsilon=0.0)
    assert {p.kind for p in c.paired_set} == {"caption", "qa", "neutral"}
    for p in c.paired_set:
        target = W.referenced_object(p.text, w)
        assert target is not None
        assert p.image.drawn == w.attributes_of(target)


def test_emit_corpora_rejects_thin_holdout():
    w = W.build_world(0, 64)
    with pytest.raises(ValueError, match="heldout"):
        W.emit_corpora(w, 0.01, seed=0)
    with pytest.raises(ValueError, match="heldout_fraction"):
        W.emit_corpora(w, 1.5, seed=0)


def test_emit_corpora_deterministic():
    w = W.build_world(0, 64)
    c1 = W.emit_corpora(w, 0.25, seed=5, epsilon=0.0)
    c2 = W.emit_corpora(w, 0.25, seed=5, epsilon=0.0)
    assert c1.lm_corpus == c2.lm_corpus
    assert c1.heldout_objects == c2.heldout_objects
    assert all(
        np.array_equal(a.image.pixels, b.image.pixels) for a, b in zip(c1.paired_set, c2.paired_set)
    )


def test_make_qa_items():
    w = W.build_world(0, 64)
    c = W.emit_corpora(w, 0.25, seed=derive_seed(0, "corpora"), epsilon=0.0)
    color_items = W.make_qa(w, c.heldout_objects, "color")
    assert len(color_items) == 16
    for item in color_items:
        assert item.candidates == W.ATTRIBUTE_VALUES["color"]
        name = W.referenced_object(item.prompt, w)
        assert item.candidates[item.gold] == w.attributes_of(name).color
    yesno = W.make_qa(w, c.heldout_objects, "size-yesno")
    assert all(it.candidates == ("yes", "no") for it in yesno)
    with pytest.raises(ValueError, match="unknown task"):
        W.make_qa(w, c.heldout_objects, "weight")


def test_qa_item_validation():
    with pytest.raises(ValueError, match="candidates"):
        W.QaItem("p", ("a", "a"), 0, "color")
    with pytest.raises(ValueError, match="gold"):
        W.QaItem("p", ("a", "b"), 5, "color")


def test_generator_image_modes():
    w = W.build_world(0, 64)
    name = w.objects[3]
    s = W.generator_image(f"what is the color of the {name} ? it is", w, 4, 0.0)
    assert s.drawn == w.attributes_of(name)
    literal = W.generator_image("a large red disc", w, 4, 0.0)
    assert literal.drawn.color == "red" and literal.drawn.shape == "disc"
    with pytest.raises(GenerationError, match="no known object"):
        W.generator_image("nothing to see here", w, 0, 0.0)
