import collections
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatial_distill import scene as sc
from spatial_distill.config import DatasetConfig
from spatial_distill.tokenizer import build_vocab

CFG = DatasetConfig()


def obj(i, cat, center, size):
    return sc.SceneObject(i, cat, tuple(map(float, center)), tuple(map(float, size)), 0.0)


def room(*objects):
    return sc.SceneGraph(0, (0.0, 0.0, 0.0), CFG.room_size, list(objects))


def check_scene(g, cfg):
    ids = [o.id for o in g.objects]
    assert len(set(ids)) == len(ids)
    for o in g.objects:
        assert all(s > 0 for s in o.size)
        assert sc.inside_room(o, g.room_lo, g.room_hi)
        assert o.category in cfg.catalog
    for i, a in enumerate(g.objects):
        for b in g.objects[i + 1 :]:
            assert sc.penetration(a, b) <= cfg.overlap_tol


def test_single_object_scene():
    g = sc.generate_scene(0, DatasetConfig(max_objects=1))
    assert len(g.objects) == 1
    check_scene(g, CFG)


def test_determinism():
    assert sc.generate_scene(3, CFG).to_dict() == sc.generate_scene(3, CFG).to_dict()


def test_five_objects_inside_room():
    cfg = DatasetConfig(min_objects=5, max_objects=5)
    g = sc.generate_scene(7, cfg)
    assert len(g.objects) == 5
    for o in g.objects:
        assert np.all(o.lo >= 0) and np.all(o.hi <= np.asarray(cfg.room_size))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scene_invariants(seed):
    check_scene(sc.generate_scene(seed, CFG), CFG)


def test_infeasible_scene_raises():
    cfg = DatasetConfig(room_size=(0.5, 0.5, 0.5), min_objects=3, max_objects=3, max_attempts=5)
    with pytest.raises(sc.SceneInfeasibleError):
        sc.generate_scene(0, cfg)


def test_scene_dict_round_trip():
    g = sc.generate_scene(11, CFG)
    assert sc.SceneGraph.from_dict(g.to_dict()) == g


# ----------------------------------------------------------------- rendering


def test_empty_scene_far_plane():
    views = sc.render_views(room(), 3, CFG)
    for v in views:
        axis = {"-z": 2, "+y": 1, "+x": 0}[v.axis]
        assert np.all(v.depth == CFG.room_size[axis])
        assert np.all(v.features == 0)


def test_unit_cube_depth():
    # camera of the top-down view sits on the ceiling at z = 3; the cube center is 2 m below it
    cube = obj(0, "box", (3.0, 3.0, 1.0), (1.0, 1.0, 1.0))
    top = sc.render_views(room(cube), 1, CFG)[0]
    g = CFG.grid
    assert top.depth[g // 2, g // 2] == pytest.approx(1.5)


def test_render_deterministic():
    g = sc.generate_scene(5, CFG)
    a = sc.render_views(g, 3, CFG)
    b = sc.render_views(g, 3, CFG)
    for x, y in zip(a, b):
        assert np.array_equal(x.depth, y.depth) and np.array_equal(x.features, y.features)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_render_ranges(seed):
    g = sc.generate_scene(seed, CFG)
    for v in sc.render_views(g, 3, CFG):
        assert v.features.shape == (CFG.grid, CFG.grid, CFG.feature_channels)
        assert np.all(v.depth >= 0) and np.all(v.depth <= g.diagonal)
        assert np.all(np.isfinite(v.features))


def test_render_bad_view_count():
    with pytest.raises(ValueError):
        sc.render_views(room(), 0, CFG)


# ----------------------------------------------------------------- relations


def test_contact_gap_zero():
    a = obj(0, "box", (1.0, 1.0, 0.5), (1.0, 1.0, 1.0))
    b = obj(1, "table", (2.0, 1.0, 0.5), (1.0, 1.0, 1.0))
    assert sc.relation_choice(room(a, b), "contact", 0, 1, CFG) == "yes"


def test_size_larger():
    a = obj(0, "bed", (1.0, 1.0, 1.0), (2.0, 2.0, 2.0))
    b = obj(1, "box", (4.0, 4.0, 0.5), (1.0, 1.0, 1.0))
    s = room(a, b)
    assert a.volume == 8 and b.volume == 1
    choice = sc.relation_choice(s, "size", 0, 1, CFG)
    assert choice == "yes"
    assert sc.answer_for("size", choice, "bed", "box") == "yes the bed is larger than the box"


def test_proximity_far():
    a = obj(0, "box", (0.0, 0.0, 0.0), (0.2, 0.2, 0.2))
    b = obj(1, "chair", (5.0, 0.0, 0.0), (0.2, 0.2, 0.2))
    s = sc.SceneGraph(0, (-1.0, -1.0, -1.0), (6.0, 6.0, 3.0), [a, b])
    assert sc.center_distance(a, b) == 5.0
    assert sc.relation_choice(s, "proximity", 0, 1, CFG) == "no"


@pytest.mark.parametrize(
    "dx,dy,sector",
    [(1, 0, "right"), (-1, 0, "left"), (0, 1, "behind"), (0, -1, "front")],
)
def test_orientation_sectors(dx, dy, sector):
    b = obj(1, "table", (3.0, 3.0, 0.5), (0.5, 0.5, 0.5))
    a = obj(0, "chair", (3.0 + dx, 3.0 + dy, 0.5), (0.5, 0.5, 0.5))
    assert sc.relation_choice(room(a, b), "orientation", 0, 1, CFG) == sector


def test_orientation_ambiguous_diagonal():
    b = obj(1, "table", (3.0, 3.0, 0.5), (0.5, 0.5, 0.5))
    a = obj(0, "chair", (4.0, 4.0, 0.5), (0.5, 0.5, 0.5))
    assert sc.relation_choice(room(a, b), "orientation", 0, 1, CFG) is None


def test_single_object_only_describe():
    g = sc.generate_scene(0, DatasetConfig(max_objects=1))
    qa = sc.make_qa(g, 0, CFG)
    assert [q.relation for q in qa] == ["describe"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_qa_round_trip(seed):
    g = sc.generate_scene(seed, CFG)
    for qa in sc.make_qa(g, seed, CFG):
        if qa.relation == "describe":
            assert qa.answer_text == sc.oracle_answer(g, "describe", [o.id for o in g.objects], CFG)
            continue
        a, b = qa.referenced_object_ids
        choice = sc.relation_choice(g, qa.relation, a, b, CFG)
        assert choice is not None
        expect = sc.answer_for(qa.relation, choice, g.by_id(a).category, g.by_id(b).category)
        assert qa.answer_text == expect
        assert len(qa.answer_text.split()) <= 12


def test_category_balance():
    counts = collections.Counter()
    seed = 0
    while sum(counts.values()) < 500:
        g = sc.generate_scene(seed, CFG)
        counts.update(q.relation for q in sc.make_qa(g, seed, CFG) if q.relation != "describe")
        seed += 1
    total = sum(counts.values())
    for rel in sc.SPATIAL_RELATIONS:
        assert counts[rel] / total >= 0.10, counts


@pytest.mark.parametrize("rel", sc.SPATIAL_RELATIONS)
def test_parse_answer_all_choices(rel):
    options = sc.SECTORS if rel == "orientation" else ("yes", "no")
    for c in options:
        assert sc.parse_answer(rel, sc.answer_for(rel, c, "box", "bed")) == c
    assert sc.parse_answer(rel, "") is None


# ----------------------------------------------------------------- teacher


def test_label_smoothing_formula():
    t = sc.smoothed_targets(np.array([3]), 100, 0.1)
    assert t[0, 3] == pytest.approx(0.9 + 0.1 / 100)
    assert t.sum() == pytest.approx(1.0)


def test_zero_smoothing_one_hot():
    t = sc.smoothed_targets(np.array([1, 2]), 10, 0.0)
    assert np.array_equal(t, np.eye(10)[[1, 2]])


def test_depth_bin_zero():
    assert np.array_equal(sc.depth_bins_onehot(np.array(0.0), 8.0, 4), [1, 0, 0, 0])


def test_missing_vocab_word():
    vocab = build_vocab(["the box"])
    with pytest.raises(sc.VocabularyError):
        sc.answer_ids("the zebra", vocab)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_teacher_distributions(seed):
    g = sc.generate_scene(seed, CFG)
    views = sc.render_views(g, CFG.n_views, CFG)
    vocab = build_vocab(sc.template_corpus(CFG.catalog))
    for qa in sc.make_qa(g, seed, CFG):
        sig = sc.teacher_signals(g, views, qa, vocab, CFG)
        for dist in (sig.soft_logits, sig.depth_bin_dist, sig.det_class_probs, sig.rel_lr, sig.rel_ab):
            assert np.all(dist >= 0)
            np.testing.assert_allclose(dist.sum(-1), 1.0, atol=1e-6)
        assert sig.spatial_features.shape == (CFG.n_views, CFG.spatial_grid, CFG.spatial_grid, CFG.spatial_channels)
        assert vocab.decode(sig.answer_token_ids) == qa.answer_text


def test_bearing_range():
    a = obj(0, "box", (0.0, -1e-9, 0.0), (0.1, 0.1, 0.1))
    b = obj(1, "box", (1.0, 0.0, 0.0), (0.1, 0.1, 0.1))
    assert -180 < sc.bearing_deg(a, b) <= 180
    assert math.isclose(abs(sc.bearing_deg(a, b)), 180, abs_tol=1e-6)
