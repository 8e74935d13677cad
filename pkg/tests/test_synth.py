"""Synthetic scenes, the analytic renderer and the simulated detector."""

from __future__ import annotations

import numpy as np
import pytest

from instmap.camera import CameraIntrinsics, Pose, backproject
from instmap.fusion import build_statistical_matrix, summarize_evidence
from instmap.synth import (
    Box,
    Corruption,
    GroundTruthScene,
    InfeasibleSceneError,
    SyntheticDetector,
    canonical_labels,
    default_confusers,
    generate_scene,
    label_model,
    noisy_label_model,
    orbit_trajectory,
    render,
    render_sequence,
    simulate_detector_log,
)

K = CameraIntrinsics.from_fov(120, 90, 70)


def test_empty_scene():
    scene = generate_scene(0, [0])
    assert scene.objects == []
    depth, ids = render(scene, orbit_trajectory(1)[0], K)
    assert not ids.any()
    assert (depth > 0).all()  # the room shell is always hit


def test_scene_deterministic_and_disjoint():
    a = generate_scene(5, [0, 2, 4, 3, 7], seed=4)
    b = generate_scene(5, [0, 2, 4, 3, 7], seed=4)
    assert a == b
    assert [o.cls for o in a.objects] == [0, 2, 4, 3, 7]
    for i, o in enumerate(a.objects):
        assert np.all(np.array(o.lo) >= a.shell_lo) and np.all(np.array(o.hi) <= a.shell_hi)
        for p in a.objects[i + 1 :]:
            assert not o.intersects(p)


def test_overfull_scene_raises():
    with pytest.raises(InfeasibleSceneError):
        generate_scene(40, [0], max_tries=200)


def test_rendered_points_lie_on_their_box():
    scene = generate_scene(3, [0, 2, 4], seed=1)
    pose = orbit_trajectory(8)[3]
    depth, ids = render(scene, pose, K)
    for box in scene.objects:
        m = ids == box.id
        if not m.any():
            continue
        p = pose.to_world(backproject(depth, K, m))
        lo, hi = np.array(box.lo), np.array(box.hi)
        assert np.all(p >= lo - 1e-6) and np.all(p <= hi + 1e-6)
        # every hit sits on a face
        on_face = np.isclose(p, lo, atol=1e-6) | np.isclose(p, hi, atol=1e-6)
        assert on_face.any(axis=1).all()


def test_nearer_box_occludes():
    near = Box((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), 0, 1)
    far = Box((-0.5, 1.5, 0.0), (0.5, 2.5, 1.0), 1, 2)
    scene = GroundTruthScene([near, far])
    pose = Pose.look_at((0.0, -3.0, 0.5), (0.0, 0.0, 0.5))
    _, ids = render(scene, pose, K)
    assert ids[45, 60] == 1


def test_clean_detector_returns_gt_masks(space):
    scene = generate_scene(3, [0, 2, 4], seed=2)
    model = label_model(space, {c: {o: 1.0} for c, o in canonical_labels(space).items()})
    det = SyntheticDetector(scene, model, Corruption(), seed=0)
    _, ids = render(scene, orbit_trajectory(4)[0], K)
    sim = det.detect(0, ids)
    assert sim.object_ids
    canon = canonical_labels(space)
    for d, oid in zip(sim.frame.detections, sim.object_ids):
        assert np.array_equal(d.mask, ids == oid)
        box = next(b for b in scene.objects if b.id == oid)
        assert [m.label for m in d.measurements] == [canon[box.cls]]
    assert sim.frame.prompt == frozenset(sim.raw_tags)


def test_detector_deterministic_per_frame(space):
    scene = generate_scene(3, [0, 2, 4], seed=2)
    model = noisy_label_model(space, 0.3, default_confusers(space), [0, 2, 4])
    _, ids = render(scene, orbit_trajectory(4)[1], K)
    a = SyntheticDetector(scene, model, Corruption(), seed=5).detect(3, ids)
    b = SyntheticDetector(scene, model, Corruption(), seed=5).detect(3, ids)
    assert [d.measurements for d in a.frame.detections] == [d.measurements for d in b.frame.detections]


def test_label_frequencies_match_plant(space):
    chair = space.closed_index("chair")
    o_chair, o_sofa, o_stool = (space.open_index(n) for n in ("chair", "sofa", "stool"))
    model = label_model(space, {chair: {o_chair: 0.6, o_sofa: 0.3, o_stool: 0.1}})
    rng = np.random.default_rng(0)
    draws = np.array([model.sample(chair, rng) for _ in range(4000)])
    for o, p in ((o_chair, 0.6), (o_sofa, 0.3), (o_stool, 0.1)):
        assert abs(np.mean(draws == o) - p) <= 0.05


def test_split_gives_two_detections_of_one_object(space):
    scene = generate_scene(2, [0, 2], seed=3)
    model = label_model(space, {c: {o: 1.0} for c, o in canonical_labels(space).items()})
    det = SyntheticDetector(scene, model, Corruption(split_prob=1.0), seed=0)
    _, ids = render(scene, orbit_trajectory(4)[0], K)
    sim = det.detect(0, ids)
    for oid in set(sim.object_ids):
        parts = [d.mask for d, o in zip(sim.frame.detections, sim.object_ids) if o == oid]
        assert len(parts) == 2
        assert not (parts[0] & parts[1]).any()
        assert np.array_equal(parts[0] | parts[1], ids == oid)


def test_missed_tag_recovered_from_extra_labels(space):
    scene = generate_scene(1, [space.closed_index("table")], seed=0)
    model = label_model(space, {c: {o: 1.0} for c, o in canonical_labels(space).items()})
    corr = Corruption(missed_tag_prob=1.0, missed_classes=frozenset({space.closed_index("table")}))
    det = SyntheticDetector(scene, model, corr, seed=0)
    _, ids = render(scene, orbit_trajectory(4)[0], K)
    assert det.detect(0, ids).frame.detections == []
    table = space.open_index("table")
    assert len(det.detect(0, ids, {table}).frame.detections) == 1


def test_sequence_detections_on_stride(space):
    scene = generate_scene(2, [0, 2], seed=0)
    model = label_model(space, {c: {o: 1.0} for c, o in canonical_labels(space).items()})
    seq = render_sequence(scene, orbit_trajectory(12), K, model, stride=5)
    assert sorted(seq.detections) == [0, 5, 10]
    gt = seq.ground_truth(0.05)
    assert {g.id for g in gt} <= {1, 2}


def test_single_object_log_recovers_planted_rows(space):
    """With one object per frame the prompt is the drawn label, so M* equals the plant."""
    classes = [space.closed_index(n) for n in ("cabinet", "chair", "table")]
    model = noisy_label_model(space, 0.3, default_confusers(space), classes)
    log = simulate_detector_log(3000, classes, model, Corruption(), np.random.default_rng(1), max_objects=1)
    m = build_statistical_matrix(summarize_evidence(log, space.n_open, space.n_closed))
    for c in classes:
        assert np.max(np.abs(m.values[:, c] - model.probs[c])) <= 0.05
