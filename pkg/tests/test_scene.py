import math

import numpy as np
import pytest

from conftest import SMALL_PROJECTION
from oracles import ray_scene_brute
from riunet.projection import ProjectionConfig, project
from riunet.scene import (
    CAR,
    CYCLIST,
    PEDESTRIAN,
    Box,
    Cylinder,
    SceneSpec,
    cast_rays,
    generate_scene,
    intersect_box,
    intersect_cylinder,
    sample_objects,
)

EMPTY = dict(cars=(0, 0), pedestrians=(0, 0), cyclists=(0, 0))


def test_no_objects_gives_ground_only():
    spec = SceneSpec(projection=SMALL_PROJECTION, **EMPTY)
    cloud = generate_scene(spec)
    assert len(cloud) > 0
    assert (cloud.labels == 0).all()
    np.testing.assert_allclose(cloud.points[:, 2], spec.ground_z, atol=1e-9)
    # upward beams see nothing, so the top rows stay empty
    img = project(cloud, SMALL_PROJECTION)
    assert not img.mask[0].any() and img.mask[-1].all()


def test_unit_box_ten_metres_ahead():
    box = Box((10.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, CAR)
    cfg = ProjectionConfig(width=256, height=64, theta_min=-0.2, theta_max=0.2, phi_min=-0.2, phi_max=0.2)
    dirs = cfg.beam_directions().reshape(-1, 3)
    t, labels = cast_rays(dirs, [box], ground_z=-5.0, max_range=80.0)
    on_box = labels == CAR
    assert on_box.sum() > 50
    pts = dirs[on_box] * t[on_box, None]
    slack = math.sqrt(3) / 2
    d = np.linalg.norm(pts, axis=1)
    assert ((d >= 10 - slack) & (d <= 10 + slack)).all()
    lo, hi = np.array([9.5, -0.5, -0.5]) - 1e-9, np.array([10.5, 0.5, 0.5]) + 1e-9
    assert ((pts >= lo) & (pts <= hi)).all()
    # the face facing the sensor is hit first
    np.testing.assert_allclose(pts[:, 0], 9.5, atol=1e-9)


def test_rotated_box_and_cylinder_hits():
    dirs = np.array([[1.0, 0.0, 0.0]])
    box = Box((10.0, 0.0, 0.0), (2.0, 1.0, 1.0), math.pi / 2, CAR)
    assert intersect_box(dirs, box)[0] == pytest.approx(9.5)
    cyl = Cylinder((6.0, 0.0), 0.5, -1.0, 1.0, PEDESTRIAN)
    assert intersect_cylinder(dirs, cyl)[0] == pytest.approx(5.5)
    above = Cylinder((6.0, 0.0), 0.5, 1.0, 2.0, PEDESTRIAN)
    assert intersect_cylinder(dirs, above)[0] == np.inf


def test_cap_hit():
    cyl = Cylinder((0.0, 0.0), 1.0, 2.0, 3.0, PEDESTRIAN)
    assert intersect_cylinder(np.array([[0.0, 0.0, 1.0]]), cyl)[0] == pytest.approx(2.0)


def test_brute_force_intersector():
    for seed in range(3):
        spec = SceneSpec(seed=seed, projection=SMALL_PROJECTION, spawn_range=(4.0, 15.0))
        objects = sample_objects(spec)
        dirs = SMALL_PROJECTION.beam_directions().reshape(-1, 3)
        cloud = generate_scene(spec)
        expected = [ray_scene_brute(tuple(d), objects, spec.ground_z, spec.max_range) for d in dirs]
        hits = [(i, t, lab) for i, (t, lab) in enumerate(expected) if math.isfinite(t)]
        assert len(hits) == len(cloud)
        for (i, t, lab), p, got in zip(hits, cloud.points, cloud.labels):
            assert np.linalg.norm(p) == pytest.approx(t, rel=1e-9, abs=1e-9)
            np.testing.assert_allclose(p / np.linalg.norm(p), dirs[i], atol=1e-12)
            assert got == lab


def test_scene_is_deterministic_and_labeled():
    spec = SceneSpec(seed=4, projection=SMALL_PROJECTION, spawn_range=(4.0, 15.0))
    a, b = generate_scene(spec), generate_scene(spec)
    assert a.points.tobytes() == b.points.tobytes() and np.array_equal(a.labels, b.labels)
    assert set(np.unique(a.labels)) <= {0, CAR, PEDESTRIAN, CYCLIST}
    assert CAR in a.labels


def test_objects_within_range_band():
    for seed in range(20):
        spec = SceneSpec(seed=seed)
        for obj in sample_objects(spec):
            xy = obj.center[:2] if isinstance(obj, Box) else obj.center_xy
            assert spec.range_band[0] <= math.hypot(*xy) <= spec.range_band[1]
            if isinstance(obj, Box):
                assert min(obj.size) > 0
            else:
                assert obj.radius > 0 and obj.z1 > obj.z0


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(spawn_range=(1.0, 5.0))
    with pytest.raises(ValueError):
        SceneSpec(cars=(3, 1))
