import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcast import scene_data as sd


def make_agent(aid, kind, xy):
    return sd.Agent(id=aid, kind=kind, positions=np.asarray(xy, dtype=np.float64))


def straight(x0, y0, vx, vy, n=7, dt=0.5):
    t = np.arange(n) * dt
    return np.stack([x0 + vx * t, y0 + vy * t], axis=1)


def make_scene(agents, scene_id="s0", split="train", dt=0.5, obs_len=1, pred_len=6):
    return sd.Scene(
        scene_id=scene_id, split=split, dt=dt, obs_len=obs_len, pred_len=pred_len,
        agents=tuple(agents),
    )


@pytest.fixture
def two_agent_scene():
    ego = make_agent(0, "ego_vehicle", straight(0, 0, 6, 0))
    ped = make_agent(1, "pedestrian", straight(5, 2, 0, -1.4))
    return make_scene([ego, ped])


def scene_line(scene):
    return sd.scene_to_json(scene)


class TestLoading:
    def test_roundtrip_single_scene(self, tmp_path, two_agent_scene):
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(two_agent_scene) + "\n")
        ds = sd.load_scenes(path)
        assert len(ds.train) == 1
        assert ds.train[0].n_agents == 2
        assert ds.train[0].obs_len == 1 and ds.train[0].pred_len == 6

    def test_multiple_ego_rejected(self, tmp_path):
        scene = make_scene(
            [make_agent(0, "ego_vehicle", straight(0, 0, 6, 0)),
             make_agent(1, "ego_vehicle", straight(3, 0, 6, 0))]
        )
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(scene) + "\n")
        with pytest.raises(sd.SceneError, match="multiple ego"):
            sd.load_scenes(path)

    def test_missing_ego_rejected(self, tmp_path):
        scene = make_scene([make_agent(1, "pedestrian", straight(4, 2, 0, -1))])
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(scene) + "\n")
        with pytest.raises(sd.SceneError, match="missing ego"):
            sd.load_scenes(path)

    def test_unknown_key_rejected_with_line_number(self, tmp_path, two_agent_scene):
        obj = json.loads(scene_line(two_agent_scene))
        obj["weather"] = "rain"
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(two_agent_scene) + "\n" + json.dumps(obj) + "\n")
        with pytest.raises(sd.SceneError, match="line 2"):
            sd.load_scenes(path)

    def test_inconsistent_dt_rejected(self, tmp_path, two_agent_scene):
        other = sd.Scene(
            scene_id="s1", split="train", dt=0.25, obs_len=1, pred_len=6,
            agents=two_agent_scene.agents,
        )
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(two_agent_scene) + "\n" + scene_line(other) + "\n")
        with pytest.raises(sd.SceneError, match="inconsistent grid"):
            sd.load_scenes(path)

    def test_nan_positions_rejected(self, tmp_path, two_agent_scene):
        xy = two_agent_scene.agents[1].positions.copy()
        xy[2, 0] = np.nan
        scene = make_scene(
            [two_agent_scene.agents[0], make_agent(1, "pedestrian", xy)], scene_id="s2"
        )
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(scene) + "\n")
        with pytest.raises(sd.SceneError, match="non-finite"):
            sd.load_scenes(path)

    def test_duplicate_scene_id_across_splits_rejected(self, tmp_path, two_agent_scene):
        other = sd.Scene(
            scene_id="s0", split="test", dt=0.5, obs_len=1, pred_len=6,
            agents=two_agent_scene.agents,
        )
        path = tmp_path / "scenes.jsonl"
        path.write_text(scene_line(two_agent_scene) + "\n" + scene_line(other) + "\n")
        with pytest.raises(sd.SceneError, match="both"):
            sd.load_scenes(path)

    def test_write_load_byte_stable(self, tmp_path):
        rng = np.random.default_rng(0)
        scenes = []
        for k in range(8):
            ego = make_agent(0, "ego_vehicle", rng.normal(size=(7, 2)) * 3)
            ped = make_agent(1, "pedestrian", rng.normal(size=(7, 2)) * 3)
            split = ("train", "val", "test")[k % 3]
            scenes.append(make_scene([ego, ped], scene_id=f"s{k}", split=split))
        ds = sd.SplitDataset(
            train=tuple(s for s in scenes if s.split == "train"),
            val=tuple(s for s in scenes if s.split == "val"),
            test=tuple(s for s in scenes if s.split == "test"),
        )
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        sd.save_scenes(p1, ds)
        sd.save_scenes(p2, sd.load_scenes(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_preserves_positions_exactly(self, tmp_path):
        rng = np.random.default_rng(1)
        ego = make_agent(0, "ego_vehicle", rng.normal(size=(7, 2)) * 10)
        scene = make_scene([ego], scene_id="rt")
        path = tmp_path / "scenes.jsonl"
        sd.save_scenes(path, sd.SplitDataset(train=(scene,), val=(), test=()))
        loaded = sd.load_scenes(path).train[0]
        assert np.abs(loaded.agents[0].positions - ego.positions).max() <= 1e-9

    def test_missing_file(self, tmp_path):
        with pytest.raises(sd.SceneError, match="not found"):
            sd.load_scenes(tmp_path / "nope.jsonl")


class TestOrdering:
    def test_ego_first_then_distance(self):
        ego = make_agent(0, "ego_vehicle", straight(0, 0, 6, 0))
        far = make_agent(1, "pedestrian", straight(3, 0, 0, 1))
        near = make_agent(2, "pedestrian", straight(1, 0, 0, 1))
        scene = make_scene([far, near, ego])
        ordered = sd.order_agents(scene)
        assert [a.id for a in ordered.agents] == [0, 2, 1]

    def test_tie_broken_by_id(self):
        ego = make_agent(1, "ego_vehicle", straight(0, 0, 6, 0))
        a7 = make_agent(7, "pedestrian", straight(0, 2, 0, 1))
        a4 = make_agent(4, "pedestrian", straight(0, -2, 0, 1))
        ordered = sd.order_agents(make_scene([a7, a4, ego]))
        assert [a.id for a in ordered.agents] == [1, 4, 7]

    def test_single_agent_scene_unchanged(self):
        ego = make_agent(0, "ego_vehicle", straight(0, 0, 6, 0))
        scene = make_scene([ego])
        assert sd.order_agents(scene).agents == scene.agents

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(5))))
    def test_idempotent_permutation(self, perm):
        rng = np.random.default_rng(123)
        agents = [make_agent(0, "ego_vehicle", rng.normal(size=(7, 2)))]
        for k in range(1, 5):
            agents.append(make_agent(k, "pedestrian", rng.normal(size=(7, 2))))
        scene = make_scene([agents[i] for i in perm])
        once = sd.order_agents(scene)
        twice = sd.order_agents(once)
        assert [a.id for a in once.agents] == [a.id for a in twice.agents]
        assert sorted(a.id for a in once.agents) == [0, 1, 2, 3, 4]
        assert once.agents[0].kind == "ego_vehicle"


class TestKinematics:
    def test_uniform_motion(self):
        pos = straight(0, 0, 2, 0, n=8, dt=0.5)
        vel, acc = sd.kinematics(pos, 0.5)
        np.testing.assert_allclose(np.linalg.norm(vel, axis=1), 2.0, atol=1e-12)
        np.testing.assert_allclose(acc, 0.0, atol=1e-12)
        assert vel.shape == pos.shape and acc.shape == pos.shape

    def test_stationary(self):
        pos = np.zeros((6, 2))
        vel, acc = sd.kinematics(pos, 0.5)
        assert np.all(vel == 0) and np.all(acc == 0)

    def test_quadratic_path_interior_accel(self):
        t = np.arange(9) * 0.5
        pos = np.stack([t**2, np.zeros_like(t)], axis=1)
        _, acc = sd.kinematics(pos, 0.5)
        np.testing.assert_allclose(np.linalg.norm(acc[1:-1], axis=1), 2.0, atol=1e-9)

    def test_too_short(self):
        with pytest.raises(sd.SceneError, match="3 positions"):
            sd.kinematics(np.zeros((2, 2)), 0.5)


class TestFrame:
    def test_local_frame_puts_ego_at_origin_heading_x(self):
        ego = make_agent(0, "ego_vehicle", straight(3, 4, 0, 2, n=8))
        ped = make_agent(1, "pedestrian", straight(5, 5, 1, 0, n=8))
        scene = make_scene([ego, ped], obs_len=2, pred_len=6)
        local, frame = sd.to_local_frame(scene)
        np.testing.assert_allclose(local.ego.positions[1], [0.0, 0.0], atol=1e-12)
        step = local.ego.positions[1] - local.ego.positions[0]
        assert step[0] > 0 and abs(step[1]) < 1e-12
        # round trip
        back = frame.to_world(local.agents[1].positions)
        np.testing.assert_allclose(back, ped.positions, atol=1e-12)

    def test_stationary_ego_defaults_heading(self):
        ego = make_agent(0, "ego_vehicle", np.tile([2.0, 3.0], (8, 1)))
        scene = make_scene([ego], obs_len=2, pred_len=6)
        local, _ = sd.to_local_frame(scene)
        np.testing.assert_allclose(local.ego.positions, 0.0, atol=1e-12)
