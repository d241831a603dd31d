import numpy as np
import pytest

from deskgrasp.assets import (
    Primitive,
    build_pose_splits,
    generate_object_set,
    load_asset_set,
    sample_surface_points,
    sample_tabletop_pose,
    save_asset_set,
    union_surface_distance,
    world_cloud,
)


def _clouds_equal(a, b):
    return a.shape == b.shape and np.array_equal(a, b)


def test_generate_counts_and_splits():
    sets = generate_object_set(8, 4, 2, seed=7)
    assert len(sets["seen"]) == 32
    assert len(sets["unseen_seen_cat"]) > 0
    assert len(sets["unseen_unseen_cat"]) > 0
    seen_cats = {a.category_id for a in sets["seen"]}
    assert {a.category_id for a in sets["unseen_seen_cat"]} <= seen_cats
    assert not ({a.category_id for a in sets["unseen_unseen_cat"]} & seen_cats)


def test_generate_deterministic():
    a = generate_object_set(3, 2, 1, seed=11)
    b = generate_object_set(3, 2, 1, seed=11)
    for key in a:
        for x, y in zip(a[key], b[key]):
            assert x.seed == y.seed
            assert _clouds_equal(x.canonical_cloud, y.canonical_cloud)
            assert x.primitives == y.primitives


def test_generate_degenerate_unseen():
    sets = generate_object_set(1, 1, 0, seed=0)
    assert sets["unseen_unseen_cat"] == []
    assert len(sets["seen"]) == 1


def test_generate_rejects_bad_counts():
    with pytest.raises(ValueError):
        generate_object_set(0, 1, 0, seed=0)
    with pytest.raises(ValueError):
        generate_object_set(1, 0, 0, seed=0)


def test_surface_fidelity_and_extent():
    sets = generate_object_set(6, 2, 2, seed=3)
    for assets in sets.values():
        for asset in assets:
            d = union_surface_distance(asset.canonical_cloud, asset.primitives)
            assert d.max() < 1e-6
            norms = np.linalg.norm(asset.canonical_cloud, axis=1)
            assert abs(norms.max() - asset.extent) < 1e-9
            assert 0.03 - 1e-6 <= asset.extent <= 0.12 + 1e-6
            centroid = asset.canonical_cloud.mean(axis=0)
            assert np.linalg.norm(centroid) < asset.extent
            assert asset.n_points == 512


def test_sphere_sampling_on_surface():
    pts = sample_surface_points((Primitive("sphere", (1.0,)),), 256, seed=5)
    assert pts.shape == (256, 3)
    assert np.abs(np.linalg.norm(pts, axis=1) - 1.0).max() < 1e-6


def test_cube_face_fractions():
    # oracle: count points per face of the unit cube, binomial tolerance
    pts = sample_surface_points((Primitive("box", (1.0, 1.0, 1.0)),), 10000, seed=9)
    fractions = []
    for axis in range(3):
        for sign in (0.5, -0.5):
            on_face = np.abs(pts[:, axis] - sign) < 1e-9
            fractions.append(on_face.mean())
    assert abs(sum(fractions) - 1.0) < 1e-9
    for frac in fractions:
        assert abs(frac - 1 / 6) < 0.02


def test_min_point_count():
    pts = sample_surface_points((Primitive("cone", (0.5, 1.0)),), 4, seed=1)
    assert pts.shape == (4, 3)
    with pytest.raises(ValueError):
        sample_surface_points((Primitive("sphere", (1.0,)),), 3, seed=1)


def test_degenerate_primitive_rejected():
    with pytest.raises(ValueError):
        Primitive("box", (1.0, 0.0, 1.0))


def test_union_rejects_buried_points():
    prims = (
        Primitive("sphere", (0.05,)),
        Primitive("sphere", (0.05,), (0.04, 0.0, 0.0)),
    )
    pts = sample_surface_points(prims, 512, seed=2)
    from deskgrasp.assets import strictly_inside

    assert not strictly_inside(pts, prims[0]).any()
    assert not strictly_inside(pts, prims[1]).any()


def test_settle_identity_sphere():
    sets = generate_object_set(1, 1, 0, seed=0, n_points=4096)
    asset = sets["seen"][0]  # catalog template 0 is a sphere
    r = asset.primitives[0].size[0]
    pose = sample_tabletop_pose(asset, seed=4, rotation=np.array([1.0, 0, 0, 0]))
    # settling puts the centroid ~one radius above the table (cloud resolution)
    assert abs(pose.translation[2] - r) < 0.02 * r


def test_settle_min_z_invariant():
    sets = generate_object_set(2, 1, 0, seed=1)
    for asset in sets["seen"]:
        for seed in range(5):
            pose = sample_tabletop_pose(asset, seed=seed)
            assert abs(np.linalg.norm(pose.rotation) - 1.0) < 1e-9
            wc = world_cloud(asset, pose)
            assert 0.0 <= wc[:, 2].min() <= 1e-6


def test_distinct_seeds_distinct_rotations():
    sets = generate_object_set(1, 1, 0, seed=0)
    a = sample_tabletop_pose(sets["seen"][0], seed=1)
    b = sample_tabletop_pose(sets["seen"][0], seed=2)
    assert not np.allclose(a.rotation, b.rotation)


def test_pose_splits_counts_disjoint():
    sets = generate_object_set(1, 1, 0, seed=0)
    asset = sets["seen"][0]
    splits = build_pose_splits(asset, (500, 50, 50), seed=3)
    assert (len(splits.train), len(splits.generation), len(splits.evaluation)) == (500, 50, 50)
    seeds = [
        {p.seed for p in splits.train},
        {p.seed for p in splits.generation},
        {p.seed for p in splits.evaluation},
    ]
    assert not (seeds[0] & seeds[1] or seeds[0] & seeds[2] or seeds[1] & seeds[2])
    with pytest.raises(ValueError):
        build_pose_splits(asset, (0, 1, 1), seed=0)


@pytest.mark.slow
def test_pose_splits_paper_scale_total():
    sets = generate_object_set(1, 1, 0, seed=0)
    splits = build_pose_splits(sets["seen"][0], (10000, 1000, 1000), seed=0)
    assert len(splits.train) + len(splits.generation) + len(splits.evaluation) == 12000


def test_manifest_roundtrip(tmp_path):
    sets = generate_object_set(2, 2, 1, seed=5)
    save_asset_set(tmp_path, sets)
    loaded = load_asset_set(tmp_path)
    for key in sets:
        assert len(loaded[key]) == len(sets[key])
        for orig, back in zip(sets[key], loaded[key]):
            assert orig.asset_id == back.asset_id
            assert orig.primitives == back.primitives
            assert _clouds_equal(orig.canonical_cloud, back.canonical_cloud)

    raw = (tmp_path / f"cloud_{sets['seen'][0].asset_id}.f32").read_bytes()
    assert len(raw) == 512 * 3 * 4  # little-endian f32 triples
