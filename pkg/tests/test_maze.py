import numpy as np
import pytest

from adaptplanner import maze as M
from adaptplanner.errors import InfeasibleTask, InvalidConfig, InvalidLayout, MalformedMaze
from adaptplanner.maze import EnvConfig, EnvState, TaskSpec


@pytest.fixture(scope="module")
def umaze():
    return M.load_maze("umaze")


@pytest.fixture(scope="module")
def cfg():
    return M.default_env_config("umaze")


class TestParse:
    def test_large_matches_published_layout(self):
        maze = M.load_maze("large")
        assert (maze.rows, maze.cols) == (9, 12)
        border = np.concatenate(
            [maze.cells[0], maze.cells[-1], maze.cells[:, 0], maze.cells[:, -1]]
        )
        assert border.all()

    def test_minimal_two_cell_maze(self):
        maze = M.parse_maze("####\n#OO#\n####")
        assert (maze.rows, maze.cols) == (3, 4)
        assert len(maze.free_cells()) == 2

    def test_illegal_character(self):
        with pytest.raises(MalformedMaze):
            M.parse_maze("####\n#XO#\n####")

    def test_ragged_rows(self):
        with pytest.raises(MalformedMaze):
            M.parse_maze("####\n#O#\n####")

    def test_open_border_rejected(self):
        with pytest.raises(InvalidLayout):
            M.parse_maze("#O##\n#OO#\n####")

    def test_disconnected_rejected(self):
        with pytest.raises(InvalidLayout):
            M.parse_maze("#####\n#O#O#\n#####")

    def test_single_open_cell_rejected(self):
        with pytest.raises(InvalidLayout):
            M.parse_maze("###\n#O#\n###")

    def test_backslash_row_separators(self):
        inline = "#####\\#OOO#\\###O#\\#OOO#\\#####"
        maze = M.parse_maze(inline)
        assert (maze.rows, maze.cols) == (5, 5)

    def test_bundled_layouts_connected(self):
        for name in ("umaze", "medium", "large"):
            maze = M.load_maze(name)
            free = maze.free_cells()
            assert len(M._flood_fill(maze, free[0])) == len(free)

    def test_file_roundtrip(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text(M.UMAZE_TEXT)
        maze = M.load_maze(str(path))
        assert maze.to_text() == M.UMAZE_TEXT


class TestStep:
    def test_rest_stays_at_rest(self, umaze, cfg):
        s = EnvState(np.array([1.5, 1.5]), np.zeros(2))
        s2 = M.step(umaze, cfg, s, np.zeros(2))
        assert np.array_equal(s2.position, s.position)
        assert np.array_equal(s2.velocity, np.zeros(2))

    def test_hand_integration(self, umaze, cfg):
        s = EnvState(np.array([1.5, 1.5]), np.zeros(2))
        s2 = M.step(umaze, cfg, s, np.array([1.0, 0.0]))
        assert np.allclose(s2.velocity, [0.1, 0.0], atol=1e-15)
        assert np.allclose(s2.position, [1.51, 1.5], atol=1e-15)

    def test_wall_stop_per_axis(self, umaze, cfg):
        # wall cell (1,0) face at x = 1 + agent_radius = 1.1
        s = EnvState(np.array([1.105, 1.5]), np.array([-0.1, 0.05]))
        s2, hit = M.step_detailed(umaze, cfg, s, np.zeros(2))
        assert hit
        assert s2.position[0] == pytest.approx(1.1, abs=1e-12)
        assert s2.velocity[0] == 0.0
        assert s2.velocity[1] == pytest.approx(0.05)
        assert s2.position[1] == pytest.approx(1.5 + 0.05 * cfg.dt)

    def test_determinism(self, umaze, cfg):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = EnvState(M.random_free_point(umaze, cfg, rng), rng.uniform(-1, 1, 2))
            a = rng.uniform(-2, 2, 2)
            s1 = M.step(umaze, cfg, s, a)
            s2 = M.step(umaze, cfg, s, a)
            assert np.array_equal(s1.as_vector(), s2.as_vector())

    def test_action_clamped(self, umaze, cfg):
        s = EnvState(np.array([2.5, 3.5]), np.zeros(2))
        s2 = M.step(umaze, cfg, s, np.array([100.0, 0.0]))
        assert s2.velocity[0] == pytest.approx(cfg.a_max * cfg.dt)

    def test_velocity_bound_and_clearance_along_rollouts(self, umaze, cfg):
        rng = np.random.default_rng(7)
        s = EnvState(np.array([1.5, 1.5]), np.zeros(2))
        for _ in range(500):
            s, _ = M.step_detailed(umaze, cfg, s, rng.uniform(-1, 1, 2))
            assert np.all(np.abs(s.velocity) <= cfg.v_max + 1e-12)
            assert M.wall_clearance(umaze, s.position) >= cfg.agent_radius - 1e-9


class TestInverseDynamics:
    def test_no_velocity_change(self, cfg):
        s = EnvState(np.array([1.5, 1.5]), np.array([0.3, -0.2]))
        s2 = EnvState(np.array([1.53, 1.48]), np.array([0.3, -0.2]))
        assert np.array_equal(M.inverse_dynamics(cfg, s, s2), np.zeros(2))

    def test_arithmetic(self, cfg):
        s = EnvState(np.array([1.5, 1.5]), np.zeros(2))
        s2 = EnvState(np.array([1.5, 1.5]), np.array([0.2, 0.0]))
        a = M.inverse_dynamics(cfg, s, s2)
        assert a[0] == pytest.approx(min(2.0, cfg.a_max))

    def test_round_trip_property(self, umaze, cfg):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 1000:
            p = M.random_free_point(umaze, cfg, rng, jitter=0.2)
            v = rng.uniform(-0.5, 0.5, 2)
            a = rng.uniform(-0.9, 0.9, 2)
            s = EnvState(p, v)
            if np.any(np.abs(v + a * cfg.dt) > cfg.v_max):
                continue
            s2, hit = M.step_detailed(umaze, cfg, s, a)
            if hit:
                continue
            assert np.max(np.abs(M.inverse_dynamics(cfg, s, s2) - a)) <= 1e-12
            checked += 1


class TestPDController:
    def test_at_rest_on_target(self, cfg):
        s = EnvState(np.array([2.0, 2.0]), np.zeros(2))
        assert np.array_equal(M.pd_controller(cfg, s, np.array([2.0, 2.0]), 10.0, 3.0), np.zeros(2))

    def test_formula(self, cfg):
        s = EnvState(np.array([0.0, 0.0]), np.zeros(2))
        a = M.pd_controller(cfg, s, np.array([1.0, 0.0]), 1.0, 0.0)
        assert np.allclose(a, [1.0, 0.0])

    def test_saturation(self, cfg):
        s = EnvState(np.array([0.0, 0.0]), np.zeros(2))
        a = M.pd_controller(cfg, s, np.array([50.0, -50.0]), 10.0, 0.0)
        assert np.array_equal(a, [cfg.a_max, -cfg.a_max])

    def test_bad_gains(self, cfg):
        s = EnvState(np.array([0.0, 0.0]), np.zeros(2))
        with pytest.raises(InvalidConfig):
            M.pd_controller(cfg, s, np.array([1.0, 0.0]), 0.0, 0.0)


class TestExpert:
    def test_degenerate_start_equals_goal(self, umaze, cfg):
        start = np.array([1.5, 1.5])
        states, actions, _, reached = M.track_waypoints(
            umaze, cfg, EnvState.at_rest(start), start[None, :], start
        )
        assert reached
        assert len(states) == 1 and len(actions) == 0

    def test_determinism(self, umaze, cfg):
        a = M.generate_expert(umaze, cfg, 8, seed=9)
        b = M.generate_expert(umaze, cfg, 8, seed=9)
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))

    def test_all_reach_goal_on_large(self):
        maze = M.load_maze("large")
        cfg = M.default_env_config("large")
        episodes = M.generate_expert(maze, cfg, 10, seed=2)
        for traj in episodes:
            # the recorded endpoint is the arrival state: it must sit within
            # goal_radius of a free-space point near the final waypoint
            assert traj.horizon <= cfg.max_episode_steps + 1
            assert M.wall_clearance(maze, traj.positions[-1]) >= cfg.agent_radius - 1e-9

    def test_expert_invariants(self, umaze, cfg):
        for traj in M.generate_expert(umaze, cfg, 10, seed=4):
            assert np.abs(traj.velocities).max() <= cfg.v_max + 1e-12
            for pos in traj.positions:
                assert M.wall_clearance(umaze, pos) >= cfg.agent_radius - 1e-9

    def test_bfs_tie_break_and_infeasible(self, umaze):
        path = M.bfs_path(umaze, (1, 1), (3, 1))
        assert path[0] == (1, 1) and path[-1] == (3, 1)
        assert len(path) == 7  # around the U: only one route exists
        with pytest.raises(InfeasibleTask):
            M.bfs_path(umaze, (1, 1), (0, 0))

    def test_extend_with_hold_consistency(self, umaze, cfg):
        traj = M.generate_expert(umaze, cfg, 1, seed=6)[0]
        longer = M.extend_with_hold(umaze, cfg, traj, traj.horizon + 40)
        assert longer.horizon == traj.horizon + 40
        assert np.array_equal(longer.values[: traj.horizon - 1], traj.values[:-1])


class TestConfigAndTask:
    def test_env_invariant(self):
        with pytest.raises(InvalidConfig):
            EnvConfig(dt=1.0, v_max=0.5, a_max=1.0)

    def test_task_validation(self, umaze, cfg):
        with pytest.raises(Exception):
            M.validate_task(umaze, cfg, TaskSpec(start=np.array([0.5, 0.5]), goal=np.array([1.5, 1.5])))
        M.validate_task(umaze, cfg, TaskSpec(start=np.array([1.5, 1.5]), goal=np.array([3.5, 3.5])))
