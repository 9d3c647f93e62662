"""Dual-encoder tests: embedding geometry, calibration, alignment scoring."""

import numpy as np
import pytest

from latefuse import percept as P
from latefuse import world as W
from latefuse.seeding import rng_for
from latefuse.textlm import Vocabulary, build_vocabulary, tokenize


def _tiny_ckpt(seed=0):
    texts = ["the lamp is red .", "a small square", "what color is the lamp ?"]
    vocab = build_vocabulary(texts)
    return P.DualEncoderCheckpoint(vocab=vocab, params=P.init_dual_params(len(vocab), seed))


def test_init_params_deterministic():
    a = P.init_dual_params(50, 3)
    b = P.init_dual_params(50, 3)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k].data, b[k].data), k
    c = P.init_dual_params(50, 4)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_joint_embeddings_unit_norm():
    ckpt = _tiny_ckpt()
    img = W.render(W.Attributes("red", "disc", "small"), 11, 0.1)
    v = P.image_joint(img, ckpt).data
    t = P.text_joint(tokenize("the lamp is red .", ckpt.vocab), ckpt).data
    assert abs(np.linalg.norm(v) - 1.0) < 1e-9
    assert abs(np.linalg.norm(t) - 1.0) < 1e-9


def test_encode_determinism():
    ckpt = _tiny_ckpt()
    img = W.render(W.Attributes("blue", "square", "large"), 5, 0.2)
    assert np.array_equal(P.image_joint(img, ckpt).data, P.image_joint(img, ckpt).data)
    ids = tokenize("a small square", ckpt.vocab)
    assert np.array_equal(P.text_joint(ids, ckpt).data, P.text_joint(ids, ckpt).data)


def test_cosine_self_and_symmetry():
    ckpt = _tiny_ckpt()
    a = P.image_joint(W.render(W.Attributes("red", "square", "small"), 1, 0.0), ckpt)
    b = P.image_joint(W.render(W.Attributes("cyan", "triangle", "large"), 2, 0.0), ckpt)
    # cosine assumes joint vectors, which are unit up to float error
    assert abs(P.cosine(a, a) - 1.0) < 1e-9
    assert abs(P.cosine(a, b) - P.cosine(b, a)) < 1e-15
    assert -1.0 - 1e-9 <= P.cosine(a, b) <= 1.0 + 1e-9


def test_calibration_endpoints_and_clamp():
    cal = P.Calibration(s_lo=0.2, s_hi=0.8)
    assert cal.confidence(0.2) == 0.0
    assert cal.confidence(0.8) == 1.0
    assert abs(cal.confidence(0.5) - 0.5) < 1e-12
    assert cal.confidence(-3.0) == 0.0
    assert cal.confidence(3.0) == 1.0


def test_calibration_degenerate_span():
    # collapsed percentiles must not divide by zero; scores saturate instead
    cal = P.Calibration(s_lo=0.5, s_hi=0.5)
    assert cal.confidence(0.6) == 1.0
    assert cal.confidence(0.4) == 0.0


def test_oracle_alignment_fractions():
    img = W.render(W.Attributes("red", "square", "small"), 9, 0.0)
    full = P.oracle_alignment({"color": "red", "shape": "square", "size": "small"}, img)
    assert full.f == 1.0 and not full.warned
    none = P.oracle_alignment({"color": "blue", "shape": "triangle", "size": "large"}, img)
    assert none.f == 0.0 and not none.warned
    half = P.oracle_alignment({"color": "red", "shape": "triangle"}, img)
    assert abs(half.f - 0.5) < 1e-12
    one_third = P.oracle_alignment({"color": "green", "shape": "square", "size": "large"}, img)
    assert abs(one_third.f - 1.0 / 3.0) < 1e-12


def test_oracle_alignment_unparseable_warns():
    img = W.render(W.Attributes("red", "square", "small"), 9, 0.0)
    for expected in (None, {}):
        score = P.oracle_alignment(expected, img)
        assert score.f == 0.0 and score.warned


def test_oracle_alignment_scores_drawn_not_truth():
    # corrupted render: oracle judges what the pixels show, not the bundle label
    for trial in range(50):
        truth = W.Attributes("red", "square", "small")
        img = W.render(truth, 1000 + trial, 0.25)
        score = P.oracle_alignment(truth.as_dict(), img)
        drawn = img.drawn.as_dict()
        expect = sum(drawn[k] == v for k, v in truth.as_dict().items()) / 3.0
        assert abs(score.f - expect) < 1e-12


def _pair(kind, text):
    img = W.render(W.Attributes("red", "square", "small"), 3, 0.0)
    return W.PairedExample(text=text, image=img, kind=kind)


def test_calibration_split_text_forms():
    pairs = [
        _pair("caption", "the widget is a small red square ."),
        _pair("qa", "what color is the widget ? red ."),
        _pair("qa", "is the widget small ? yes ."),
        _pair("neutral", "the widget sits on the table ."),
    ]
    split = P.calibration_split(pairs)
    texts = [t for t, _ in split]
    # captions never appear; answers are stripped from questions
    assert all("small red square" not in t for t in texts)
    assert "what color is the widget ?" in texts
    assert "is the widget small ? yes" in texts  # yes/no answers are not attribute values
    assert "the widget sits on the table ." in texts
    assert len(split) == 3


def test_calibrate_needs_two_pairs():
    ckpt = _tiny_ckpt()
    with pytest.raises(ValueError):
        P.calibrate(ckpt, [_pair("neutral", "a lamp .")])


def test_alignment_is_calibrated_cosine():
    ckpt = _tiny_ckpt()
    cal = P.Calibration(s_lo=-0.5, s_hi=0.5)
    img = W.render(W.Attributes("red", "square", "small"), 21, 0.0)
    score = P.alignment("the lamp is red .", img, ckpt, cal)
    t = P.text_joint(tokenize("the lamp is red .", ckpt.vocab), ckpt)
    v = P.image_joint(img, ckpt)
    assert abs(score.raw - P.cosine(t, v)) < 1e-12
    assert abs(score.f - cal.confidence(score.raw)) < 1e-12


# ---------------------------------------------------------------------------
# trained encoder properties (shared pipeline artifacts)
# ---------------------------------------------------------------------------


def test_matched_beats_corrupted_on_heldout(stack):
    """Clean matched pair must out-score an attribute-corrupted image almost
    always, measured on objects whose attributes never appeared in training
    text."""
    w, vision, cal = stack.world, stack.vision, stack.calibration
    caps = W.make_captions(w, stack.corpora.heldout_objects)
    rng = rng_for(999, "corrupt-trials")
    wins = 0
    trials = 500
    for t in range(trials):
        cap, name = caps[int(rng.integers(0, len(caps)))]
        attrs = w.attributes_of(name)
        matched = W.render(attrs, 10_000 + t, 0.0)
        other = [c for c in W.COLORS if c != attrs.color]
        bad = W.Attributes(other[int(rng.integers(0, len(other)))], attrs.shape, attrs.size)
        corrupted = W.render(bad, 20_000 + t, 0.0)
        f_match = P.alignment(cap, matched, vision, cal).f
        f_bad = P.alignment(cap, corrupted, vision, cal).f
        wins += f_match > f_bad
    assert wins >= 0.90 * trials, f"{wins}/{trials}"


def test_trained_calibration_span_positive(stack):
    assert stack.calibration.s_hi > stack.calibration.s_lo
