import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tofdenoise.boundary import (
    N_GROUPS, BoundaryModelSet, EdgeMap, build_boundary_dataset, canny, detect_boundaries,
    edges_from_scores, fuse_max_response, gt_edges, hysteresis, load_boundary_models, nms_scores,
    read_edge_map, save_boundary_models, tangent_group, train_boundary_nns, write_edge_map,
)
from tofdenoise.encode import EncoderParams
from tofdenoise.imagecore import AmplitudeImage, RangeImage
from tofdenoise.mlp import TrainConfig, boundary_net, encode_model, range_net

ENC = EncoderParams().with_amplitude_span([0.0, 1.0])


def vertical_step(shape=(32, 32), col=16, near=200.0, far=300.0):
    d = np.full(shape, near)
    d[:, col:] = far
    return RangeImage(d)


def test_tangent_groups():
    # gradient along +x means a vertical edge line
    assert list(tangent_group([0, 45, 90, 135, 180, -45])) == [2, 3, 0, 1, 2, 1]


def test_constant_image_has_no_edges():
    em = canny(RangeImage(np.full((20, 20), 250.0)))
    assert not em.edge.any()
    assert not em.thin.any()


def test_vertical_step_gives_one_pixel_line_on_deeper_side():
    em = gt_edges(vertical_step())
    ys, xs = np.nonzero(em.edge)
    assert set(xs) == {16}
    assert len(ys) == 32
    assert np.all(em.direction[em.edge] == 2)
    # reversed step: deeper side is now on the left
    flipped = gt_edges(vertical_step(near=300.0, far=200.0))
    assert set(np.nonzero(flipped.edge)[1]) == {15}


def test_horizontal_step_group_zero():
    em = gt_edges(RangeImage(vertical_step().data.T.copy()))
    assert set(np.nonzero(em.edge)[0]) == {16}
    assert np.all(em.direction[em.edge] == 0)


def test_diagonal_step_groups():
    y, x = np.mgrid[:32, :32]
    em = gt_edges(RangeImage(np.where(x > y, 300.0, 200.0)))
    interior = em.edge[4:-4, 4:-4]
    assert interior.sum() >= 20
    assert np.all(em.direction[4:-4, 4:-4][interior] == 1)
    em2 = gt_edges(RangeImage(np.where(x + y > 31, 300.0, 200.0)))
    inner2 = em2.edge[4:-4, 4:-4]
    assert inner2.sum() >= 20 and np.all(em2.direction[4:-4, 4:-4][inner2] == 3)


def test_small_step_below_threshold():
    assert not gt_edges(vertical_step(near=250.0, far=253.0)).edge.any()


def test_missing_pixels_never_edges():
    r = vertical_step()
    mask = np.ones(r.shape, bool)
    mask[:, 16] = False
    em = canny(RangeImage(r.data, mask))
    assert not em.edge[:, 16].any()


def test_max_response_example():
    probs = np.array([0.9, 0.2, 0.2, 0.2]).reshape(4, 1, 1)
    s, d = fuse_max_response(probs)
    assert s[0, 0] == 0.9 and d[0, 0] == 0
    tie = np.array([0.5, 0.7, 0.7, 0.1]).reshape(4, 1, 1)
    assert fuse_max_response(tie)[1][0, 0] == 1


def test_two_pixel_ridge_is_thinned():
    probs = np.zeros((4, 10, 10))
    probs[2, :, 4:6] = 0.8
    em = edges_from_scores(probs)
    assert em.edge[:, 4:6].sum(axis=1).tolist() == [1] * 10
    assert not em.edge[:, :4].any() and not em.edge[:, 6:].any()


def test_hysteresis_example():
    vals = np.array([[0.4, 0.4, 0.7, 0.0, 0.4]])
    cand = np.ones_like(vals, dtype=bool)
    assert hysteresis(vals, cand, 0.3, 0.6).tolist() == [[True, True, True, False, False]]


scores = arrays(np.float64, (12, 12), elements=st.floats(0, 1, allow_nan=False, width=32))
dirs = arrays(np.int8, (12, 12), elements=st.integers(0, 3))


@settings(max_examples=60, deadline=None)
@given(scores, dirs)
def test_nms_idempotent(score, direction):
    thin = nms_scores(score, direction)
    assert np.array_equal(nms_scores(np.where(thin, score, 0.0), direction), thin)


@settings(max_examples=60, deadline=None)
@given(scores, st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5))
def test_hysteresis_monotone(score, low, high, drop):
    low, high = min(low, high), max(low, high)
    cand = score > 0.1
    a = hysteresis(score, cand, low, high)
    b = hysteresis(score, cand, max(0.0, low - drop), max(0.0, high - drop))
    assert np.all(b[a])
    assert np.all(cand[a] & (score[a] >= low))


def biased_models(bias_edge: float) -> BoundaryModelSet:
    nets = []
    for g in range(N_GROUPS):
        net = boundary_net(g)
        net.weights[-1] = np.zeros_like(net.weights[-1])
        net.biases[-1] = np.array([0.0, bias_edge])
        nets.append(net)
    return BoundaryModelSet(ENC, nets)


def test_all_negative_detectors_give_empty_map():
    r = vertical_step()
    em = detect_boundaries(biased_models(-20.0), r, AmplitudeImage(np.ones(r.shape)))
    assert not em.edge.any()
    assert em.score.max() < 1e-6


def test_model_set_validation():
    with pytest.raises(ValueError):
        BoundaryModelSet(ENC, [boundary_net()] * 3)
    with pytest.raises(ValueError):
        BoundaryModelSet(ENC, [range_net()] * 4)


def scene_triples():
    y, x = np.mgrid[:40, :40]
    d = np.full((40, 40), 300.0)
    d[10:30, 10:30] = 260.0
    d = np.where(x + y > 62, 330.0, d)
    r = RangeImage(d + np.random.default_rng(0).normal(0, 0.3, d.shape))
    a = AmplitudeImage(np.full((40, 40), 0.5))
    return [(r, a, RangeImage(d))]


def test_boundary_dataset_labels():
    triples = scene_triples()
    gt = gt_edges(triples[0][2])
    sets = build_boundary_dataset(triples, ENC, seed=0, neg_ratio=3.0)
    assert len(sets) == 4
    elig = np.zeros((40, 40), bool)
    elig[5:35, 5:35] = True
    for g, s in enumerate(sets):
        n_pos = int((gt.edge & elig & (gt.direction == g)).sum())
        n_other = int((gt.edge & elig & (gt.direction != g)).sum())
        n_non = int((~gt.edge & elig).sum())
        assert int(s.targets.sum()) == n_pos
        assert len(s) == n_pos + n_other + min(n_non, round(3 * max(n_pos, 1)))
        assert s.inputs.shape[1] == 240
    again = build_boundary_dataset(triples, ENC, seed=0, neg_ratio=3.0)
    assert all(np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)
               for a, b in zip(sets, again))


def test_train_and_file_roundtrip(tmp_path):
    sets = build_boundary_dataset(scene_triples(), ENC, seed=0)
    models = train_boundary_nns(sets, ENC, TrainConfig(epochs=2, batch_size=50))
    assert all(len(l) == 2 for l in models.epoch_losses)
    paths = save_boundary_models(models, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"boundary_g{g}.tfr" for g in range(4)]
    assert len(paths) == 4
    back = load_boundary_models(tmp_path)
    assert back.encoder == ENC
    assert all(encode_model(a) == encode_model(b) for a, b in zip(back.nets, models.nets))
    again = train_boundary_nns(sets, ENC, TrainConfig(epochs=2, batch_size=50))
    assert all(encode_model(a) == encode_model(b) for a, b in zip(again.nets, models.nets))


def test_edge_map_file_roundtrip(tmp_path):
    em = gt_edges(scene_triples()[0][2])
    write_edge_map(em, tmp_path / "e.tfd", tmp_path / "o.tfd")
    back = read_edge_map(tmp_path / "e.tfd", tmp_path / "o.tfd")
    assert np.array_equal(back.edge, em.edge)
    assert np.array_equal(back.orientation_group, em.orientation_group)


def test_edge_map_validation():
    with pytest.raises(ValueError):
        EdgeMap(np.zeros((2, 2)), np.zeros((2, 2)), np.full((2, 2), 2.0))
    with pytest.raises(ValueError):
        EdgeMap(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)))
