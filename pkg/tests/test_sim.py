import numpy as np
import pytest

from deskgrasp.assets import generate_object_set, sample_tabletop_pose
from deskgrasp.config import DESK_PROFILE, EnvConfig, ExperimentConfig
from deskgrasp.hand import DEFAULT_HAND, local_hand_points, world_hand_points
from deskgrasp.pipeline import make_assets, make_splits
from deskgrasp.sim import (
    GraspEnv,
    hand_points,
    is_success,
    min_distances,
    reset,
    step,
    time_embedding,
)


@pytest.fixture(scope="module")
def smoke():
    cfg = ExperimentConfig()
    cfg.assets.categories = 4
    cfg.assets.per_category = 1
    cfg.assets.unseen_categories = 0
    cfg.assets.train_poses = 20
    cfg.assets.generation_poses = 5
    cfg.assets.evaluation_poses = 5
    sets = make_assets(cfg)
    splits = {a.asset_id: make_splits(cfg, a) for a in sets["seen"]}
    return cfg, sets["seen"], splits


# -- reset / step ------------------------------------------------------------


def test_reset_contract(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    pose = splits[asset.asset_id].train[0]
    s = reset(asset, pose)
    assert s.step == 0 and not s.grasped
    assert np.array_equal(s.prev_action, np.zeros(9))
    assert np.allclose(s.wrist, [0.0, 0.2, 0.0])
    assert np.array_equal(s.q, DEFAULT_HAND.q_open_array)
    s2 = reset(asset, pose)
    assert np.array_equal(s.obj_pos, s2.obj_pos)
    assert np.array_equal(s.obj_quat, s2.obj_quat)


def test_reset_sphere_settles_on_table(smoke):
    cfg, assets, splits = smoke
    sphere = assets[0]
    r = sphere.primitives[0].size[0]
    pose = sample_tabletop_pose(sphere, seed=0, rotation=np.array([1.0, 0, 0, 0]))
    s = reset(sphere, pose)
    # 512 surface samples leave a ~2r/N settling margin at the pole
    assert abs(s.obj_pos[2] - r) < 0.05 * r


def test_step_statics_and_fall(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    s = reset(asset, splits[asset.asset_id].train[0])
    s1 = step(s, np.zeros(9), asset)
    assert np.allclose(s1.obj_pos, s.obj_pos, atol=1e-12)  # on table, untouched

    # hoist the object into the air: it falls by exactly g_step per step
    s_air = reset(asset, splits[asset.asset_id].train[0])
    s_air.obj_pos = s_air.obj_pos + np.array([0.0, 0.0, 0.1])
    s_next = step(s_air, np.zeros(9), asset)
    assert abs((s_air.obj_pos[2] - s_next.obj_pos[2]) - 0.01) < 1e-12


def test_step_rigid_follow(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    env = GraspEnv(asset, cfg.env, n_envs=1)
    env.reset_all([splits[asset.asset_id].train[0]])
    # drive a grasp: descend then close
    for _ in range(9):
        env.step(np.array([[0, -1.0, 0, 0, 0, 0, 0, 0, 0]], dtype=float))
    for _ in range(14):
        env.step(np.array([[0, -0.2, 0, 1, 1, 1, 1, 1, 1]], dtype=float))
    assert env.grasped[0], "scripted grasp should attach"
    before = env.obj_pos[0].copy()
    env.step(np.array([[0, 1.0, 0, 0, 0, 0, 0, 0, 0]], dtype=float))
    moved = env.obj_pos[0] - before
    assert abs(moved[2] - cfg.env.wrist_deltas[1]) < 1e-9 and abs(moved[0]) < 1e-9

    # rigid-follow invariant: wrist-frame transform is constant
    rel_before = env.attach_pos[0].copy()
    for _ in range(5):
        env.step(np.array([[0.3, 0.5, 0.2, 0, 0, 0, 0, 0, 0]], dtype=float))
    assert env.grasped[0]
    assert np.allclose(env.attach_pos[0], rel_before, atol=1e-12)


def test_table_impenetrable_fuzz(smoke):
    cfg, assets, splits = smoke
    asset = assets[1]
    env = GraspEnv(asset, cfg.env, n_envs=8)
    env.reset_all([splits[asset.asset_id].train[i % 20] for i in range(8)])
    rng = np.random.default_rng(0)
    hand = env.hand
    for _ in range(300):
        env.step(rng.uniform(-1, 1, (8, 9)))
        assert (env.obj_pos[:, 2] >= -1e-12).all()
        assert (env.world_cloud()[:, :, 2].min(axis=1) >= -1e-9).all()
        assert (env.q >= hand.joint_low).all() and (env.q <= hand.joint_high).all()


def test_step_determinism(smoke):
    cfg, assets, splits = smoke
    asset = assets[2]
    rng = np.random.default_rng(1)
    actions = rng.uniform(-1, 1, (50, 3, 9))

    def run():
        env = GraspEnv(asset, cfg.env, n_envs=3)
        env.reset_all([splits[asset.asset_id].train[i] for i in range(3)])
        for a in actions:
            env.step(a)
        return env.obj_pos.copy(), env.q.copy(), env.wrist.copy()

    r1, r2 = run(), run()
    for x, y in zip(r1, r2):
        assert np.array_equal(x, y)


def test_action_clamp_and_strict(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    s = reset(asset, splits[asset.asset_id].train[0])
    s2 = step(s, np.full(9, 2.0), asset)
    assert s2.clipped
    assert np.array_equal(s2.prev_action, np.ones(9))
    strict_cfg = EnvConfig(strict_actions=True)
    with pytest.raises(ValueError):
        step(s, np.full(9, 2.0), asset, env_cfg=strict_cfg)


# -- hand points ---------------------------------------------------------------


def test_hand_points_match_symbolic_fk():
    hand = DEFAULT_HAND
    q = hand.q_open_array
    pts = local_hand_points(hand, q)
    # oracle: write out the 2-link trigonometry for each finger by hand
    for f, (base, sign) in enumerate(zip(hand.finger_bases, hand.curl_signs)):
        l1, l2 = hand.link_lengths[f]
        a1, a2 = q[2 * f], q[2 * f] + q[2 * f + 1]
        mid = np.array(base) + l1 * np.array([sign * np.sin(a1), 0.0, -np.cos(a1)])
        tip = mid + l2 * np.array([sign * np.sin(a2), 0.0, -np.cos(a2)])
        assert np.allclose(pts[f], tip, atol=1e-12)
        assert np.allclose(pts[hand.fingers + f], mid, atol=1e-12)
    assert np.allclose(pts[6], hand.palm_points[0], atol=1e-12)


def test_hand_points_translation_equivariance():
    hand = DEFAULT_HAND
    q = np.full(6, 0.4)
    base = world_hand_points(hand, np.array([0.0, 0.2, 0.1]), q)
    shifted = world_hand_points(hand, np.array([0.05, 0.3, 0.1]), q)
    assert np.allclose(shifted - base, [0.05, 0.0, 0.1], atol=1e-12)


def test_hand_points_rotation_isometry():
    hand = DEFAULT_HAND
    q = np.full(6, 0.7)
    a = world_hand_points(hand, np.array([0.0, 0.2, 0.0]), q)
    b = world_hand_points(hand, np.array([0.0, 0.2, np.pi]), q)

    def pairwise(p):
        return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)

    assert np.allclose(pairwise(a), pairwise(b), atol=1e-9)


# -- min distances -----------------------------------------------------------


def test_min_distances_basic():
    cloud = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]])
    assert min_distances(np.array([[0.0, 0.0, 1.0]]), cloud)[0] == pytest.approx(0.5)
    assert min_distances(np.array([[0.0, 0.0, 0.5]]), cloud)[0] == 0.0


def test_min_distances_brute_force():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(8, 3))
    cloud = rng.normal(size=(64, 3))
    got = min_distances(pts, cloud)
    brute = np.array([min(np.linalg.norm(p - c) for c in cloud) for p in pts])
    assert np.abs(got - brute).max() < 1e-7


def test_min_distances_empty_cloud():
    with pytest.raises(ValueError):
        min_distances(np.zeros((2, 3)), np.zeros((0, 3)))


def test_env_distances_match_op(smoke):
    cfg, assets, splits = smoke
    asset = assets[3]
    env = GraspEnv(asset, cfg.env, n_envs=4)
    env.reset_all([splits[asset.asset_id].train[i] for i in range(4)])
    rng = np.random.default_rng(5)
    for _ in range(30):
        env.step(rng.uniform(-1, 1, (4, 9)))
    for i in range(4):
        ref = min_distances(env.hand_points()[i], env.world_cloud()[i])
        assert np.abs(ref - env.distances()[i]).max() < 2e-6


# -- time embedding -------------------------------------------------------------


def test_time_embedding_t0():
    e = time_embedding(0, 200)
    assert e.shape == (29,)
    assert e[0] == 0.0
    assert np.array_equal(e[1::2], np.zeros(14))   # sines
    assert np.array_equal(e[2::2], np.ones(14))    # cosines


def test_time_embedding_length_and_norm():
    for t in (0, 7, 100, 200):
        e = time_embedding(t, 200)
        assert len(e) == 29
    assert time_embedding(200, 200)[0] == 1.0


def test_time_embedding_frequencies():
    t, horizon = 37, 200
    e = time_embedding(t, horizon)
    x = t / horizon
    for k in range(1, 15):
        omega = 2 * np.pi * 2 ** (k - 1) / 2**13
        assert e[1 + 2 * (k - 1)] == pytest.approx(np.sin(omega * x), abs=1e-12)
        assert e[2 + 2 * (k - 1)] == pytest.approx(np.cos(omega * x), abs=1e-12)


# -- observations ------------------------------------------------------------


def test_observation_group_lengths_fuzzed(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    env = GraspEnv(asset, cfg.env, n_envs=16)
    env.reset_all([splits[asset.asset_id].train[i % 20] for i in range(16)])
    rng = np.random.default_rng(0)
    expected = dict(zip(
        ("proprioception", "prev_action", "object_state", "hand_object_dist", "time"),
        (33, 9, 16, 8, 29),
    ))
    for _ in range(63):
        env.step(rng.uniform(-1, 1, (16, 9)))
        groups = env.observe_groups("specialist")
        assert list(groups) == list(expected)
        for name, dim in expected.items():
            assert groups[name].shape == (16, dim)


def test_observation_object_at_goal_delta(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    env = GraspEnv(asset, cfg.env, n_envs=1)
    env.reset_all([splits[asset.asset_id].train[0]])
    env.obj_pos[0] = env.goal
    groups = env.observe_groups("specialist")
    assert np.allclose(groups["object_state"][0, 13:16], 0.0, atol=1e-12)


def test_observation_feature_group_and_mismatch(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    env = GraspEnv(asset, cfg.env, n_envs=2)
    env.reset_all([splits[asset.asset_id].train[i] for i in range(2)])

    class StubEncoder:
        def __init__(self, dim):
            self.dim = dim

        def encode_batch(self, clouds):
            return np.zeros((clouds.shape[0], self.dim), dtype=np.float32)

    obs = env.observe(setting="state", encoder=StubEncoder(32))
    assert [v.shape[-1] for v in obs.groups.values()] == [33, 9, 16, 32, 8, 29]
    with pytest.raises(ValueError):
        env.observe_groups("state", StubEncoder(16))


def test_observation_vision_lengths(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    env = GraspEnv(asset, cfg.env, n_envs=2)
    env.reset_all([splits[asset.asset_id].train[i] for i in range(2)])

    class StubEncoder:
        def encode_batch(self, clouds):
            return np.zeros((clouds.shape[0], 32), dtype=np.float32)

    partials = env.world_cloud()[:, :128].copy()
    obs = env.observe(setting="vision", encoder=StubEncoder(), partial_clouds=partials)
    assert [v.shape[-1] for v in obs.groups.values()] == [33, 9, 12, 32, 8, 29]


# -- success ----------------------------------------------------------------


def test_success_threshold(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    s = reset(asset, splits[asset.asset_id].train[0])
    s.step = 200
    s.obj_pos = s.goal + np.array([0.049, 0.0, 0.0])
    assert is_success(s) is True
    s.obj_pos = s.goal + np.array([0.05, 0.0, 0.0])
    assert is_success(s) is False  # strict inequality
    s.obj_pos = np.array([0.0, 0.0, 0.05])
    assert is_success(s) is False


def test_module_level_observe_matches_env(smoke):
    from deskgrasp.sim import observe

    cfg, assets, splits = smoke
    asset = assets[0]
    env = GraspEnv(asset, cfg.env, n_envs=1)
    env.reset_all([splits[asset.asset_id].train[0]])
    rng = np.random.default_rng(2)
    for _ in range(7):
        env.step(rng.uniform(-1, 1, (1, 9)))
    via_env = env.observe("specialist")
    via_state = observe(env.state(0), asset, env_cfg=cfg.env)
    for name in via_env.groups:
        assert np.allclose(via_state[name], via_env[name], atol=1e-9), name


def test_success_strict_step_check(smoke):
    cfg, assets, splits = smoke
    asset = assets[0]
    s = reset(asset, splits[asset.asset_id].train[0])
    with pytest.raises(ValueError):
        is_success(s)
    assert is_success(s, strict=False) in (True, False)
