import os
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import BIAS_ANGLE, KNIFE_LENGTH
from errors import ConfigError, DegenerateObjectError, PlanningError, UnsupportedStyleError
from mpm_core import SimConfig
from trajectory_planner import (
    AugmentRanges,
    CutState,
    CutTask,
    SceneSpec,
    StyleParams,
    Trajectory,
    aabb_in_workspace,
    augment,
    compute_aabb,
    cut_axis_of,
    cut_planes,
    detect_contact_phase,
    evaluate_success,
    generate_trajectory,
    interpolate_pose,
    object_aabb,
    style_transfer,
)

# 12 cm long along x, 6 cm tall, resting on the board
AABB = (np.array([0.19, 0.05, 0.23]), np.array([0.31, 0.11, 0.27]))


def _normal(planes=(0.25,), v=0.06):
    return generate_trajectory(CutTask("Normal", v=v), list(planes), AABB)


def test_compute_aabb_and_cut_axis():
    lo, hi = compute_aabb([[0.0, 1.0, 2.0], [1.0, -1.0, 0.0]])
    assert np.array_equal(lo, [0.0, -1.0, 0.0]) and np.array_equal(hi, [1.0, 1.0, 2.0])
    assert cut_axis_of(AABB) == 0
    assert cut_axis_of((np.zeros(3), np.array([1.0, 1.0, 1.0]))) == 0
    assert cut_axis_of((np.zeros(3), np.array([0.1, 1.0, 0.3]))) == 2
    with pytest.raises(DegenerateObjectError):
        compute_aabb(np.empty((0, 3)))


def test_cut_planes_examples():
    aabb = (np.array([2.0, 0.0, 0.0]), np.array([4.0, 1.0, 1.0]))
    assert cut_planes(aabb, CutState.middle(), 0) == [pytest.approx(3.0)]
    assert cut_planes(aabb, CutState.ratio_cut(0.3, "right"), 0) == [pytest.approx(3.4)]
    assert cut_planes(aabb, CutState.split(4), 0) == [pytest.approx(2.5), pytest.approx(3.0), pytest.approx(3.5)]
    assert cut_planes(aabb, CutState.split(4, boundary=1, side="right"), 0) == [pytest.approx(3.5)]
    with pytest.raises(DegenerateObjectError):
        cut_planes((np.zeros(3), np.zeros(3)), CutState.middle(), 0)


@given(st.floats(min_value=0.01, max_value=0.99))
def test_left_and_right_ratios_are_dual(r):
    left = cut_planes(AABB, CutState.ratio_cut(r, "left"), 0)
    right = cut_planes(AABB, CutState.ratio_cut(1.0 - r, "right"), 0)
    assert left == [pytest.approx(right[0], abs=1e-9)]


def test_invalid_cut_states():
    with pytest.raises(ConfigError):
        CutState.ratio_cut(1.0)
    with pytest.raises(ConfigError):
        CutState.split(1)
    with pytest.raises(ConfigError):
        CutState.split(4, boundary=4)
    with pytest.raises(ConfigError):
        CutTask("Chop")


def test_normal_cut_is_purely_vertical():
    traj = _normal()
    assert np.allclose(traj.position[:, 0], 0.25)
    assert np.allclose(traj.position[:, 2], 0.25)
    assert list(dict.fromkeys(traj.phase)) == ["approach", "contact", "retract"]
    assert traj.position[0, 1] == pytest.approx(0.11 + 0.03)
    assert traj.position[-1, 1] == pytest.approx(0.11 + 0.03)


def test_bias_cut_offset():
    traj = generate_trajectory(CutTask("Bias", v=0.06), [0.25], AABB)
    (start, end), = traj.contact_runs()
    offset = traj.position[end, 0] - traj.position[start, 0]
    assert offset == pytest.approx(0.06 * np.tan(BIAS_ANGLE))
    assert offset == pytest.approx(0.0346, abs=1e-4)
    assert traj.position[start, 0] == pytest.approx(0.25 - 0.5 * offset)


def test_saw_oscillates_along_the_blade():
    params = StyleParams(saw_frequency=4.0)
    traj = generate_trajectory(CutTask("Saw", v=0.06), [0.25], AABB, params)
    (start, end), = traj.contact_runs()
    assert traj.t[end] - traj.t[start] == pytest.approx(1.0)
    lateral = np.diff(traj.position[start : end + 1, 2])
    signs = np.sign(lateral[lateral != 0.0])
    assert np.count_nonzero(np.diff(signs)) >= 7
    assert np.allclose(traj.position[start:end, 0], 0.25)


def test_guillotine_pivots_about_a_fixed_tip():
    traj = generate_trajectory(CutTask("Guillotine", v=0.06), [0.25], AABB)
    (start, end), = traj.contact_runs()
    rotations = traj.rotation_matrices()
    tips = np.array([traj.position[i] + rotations[i] @ [0.5 * KNIFE_LENGTH, 0.0, 0.0] for i in range(start, end + 1)])
    assert np.allclose(tips, tips[0])
    # the blade ends flat
    assert np.allclose(rotations[end][:, 0] @ [0.0, 1.0, 0.0], 0.0, atol=1e-12)


def test_multi_plane_cuts_run_in_ascending_order():
    traj = _normal(planes=(0.28, 0.22))
    runs = traj.contact_runs()
    assert len(runs) == 2
    assert [traj.position[s, 0] for s, _ in runs] == [pytest.approx(0.22), pytest.approx(0.28)]


def test_planning_errors():
    with pytest.raises(PlanningError):
        _normal(planes=())
    with pytest.raises(PlanningError):
        _normal(planes=(0.5,))
    with pytest.raises(PlanningError):
        generate_trajectory(CutTask("Normal", v=0.0), [0.25], AABB)


def test_interpolate_pose_hits_waypoints():
    traj = _normal()
    for i in (0, 7, len(traj) - 1):
        rotation, position = interpolate_pose(traj, traj.t[i])
        assert np.allclose(position, traj.position[i])
        assert np.allclose(rotation, traj.rotation_matrices()[i])
    _, position = interpolate_pose(traj, traj.t[-1] + 10.0)
    assert np.allclose(position, traj.position[-1])


def test_transfer_to_normal_is_identity():
    traj = _normal()
    assert style_transfer(traj, "Normal", 3).same_path(traj)


def test_transfer_keeps_the_prefix_bit_identical():
    traj = _normal()
    (start, _), = traj.contact_runs()
    saw = style_transfer(traj, "Saw", start, StyleParams(saw_frequency=4.0))
    assert saw.style == "Saw"
    assert saw.skeleton is traj
    assert np.array_equal(saw.t[:start], traj.t[:start])
    assert np.array_equal(saw.position[:start], traj.position[:start])
    assert np.array_equal(saw.quat[:start], traj.quat[:start])
    assert list(saw.phase[:start]) == list(traj.phase[:start])
    assert "contact" in set(saw.phase[start:])


@pytest.mark.parametrize("style", ["Bias", "Saw", "Guillotine"])
def test_transfer_twice_from_the_skeleton_equals_once(style):
    traj = _normal()
    (start, _), = traj.contact_runs()
    params = StyleParams(saw_frequency=4.0)
    once = style_transfer(traj, style, start, params)
    twice = style_transfer(once.skeleton, style, start, params)
    assert twice.same_path(once)
    assert style_transfer(once.skeleton, "Normal", start).same_path(traj)


def test_transfer_at_the_last_waypoint_changes_nothing_but_style():
    traj = _normal()
    out = style_transfer(traj, "Bias", len(traj) - 1)
    assert out.style == "Bias"
    assert np.array_equal(out.position, traj.position)
    assert list(out.phase) == list(traj.phase)


def test_transfer_rejects_styled_input():
    bias = generate_trajectory(CutTask("Bias"), [0.25], AABB)
    with pytest.raises(UnsupportedStyleError):
        style_transfer(bias, "Saw", 0)
    with pytest.raises(PlanningError):
        style_transfer(_normal(), "Saw", 10_000)


def test_detect_contact_phase():
    traj = _normal()
    (start, _), = traj.contact_runs()
    assert detect_contact_phase(traj, AABB) == start
    assert detect_contact_phase(traj, AABB) > 0
    far = (AABB[0] + [1.0, 0.0, 0.0], AABB[1] + [1.0, 0.0, 0.0])
    assert detect_contact_phase(traj, far) is None


def test_evaluate_success_tolerances():
    axis = [1.0, 0.0, 0.0]
    ok = evaluate_success([0.59], [0.5], 1.0, axis, axis)
    assert ok.success and ok.reason == "ok" and ok.planes_within_tolerance == 1
    off = evaluate_success([0.61], [0.5], 1.0, axis, axis)
    assert not off.success and off.reason == "position out of tolerance"
    tilted = [np.cos(np.radians(10.0)), np.sin(np.radians(10.0)), 0.0]
    angled = evaluate_success([0.5], [0.5], 1.0, tilted, axis)
    assert not angled.success and angled.reason == "angle out of tolerance"
    assert angled.angle_error == pytest.approx(np.radians(10.0))


def test_evaluate_success_count_mismatch():
    verdict = evaluate_success([0.3], [0.25, 0.5, 0.75], 1.0, [1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert not verdict.success
    assert verdict.reason == "count mismatch"
    assert verdict.plane_errors == ()
    with pytest.raises(DegenerateObjectError):
        evaluate_success([0.5], [0.5], 0.0, [1.0, 0.0, 0.0], [1.0, 0.0, 0.0])


@given(
    st.lists(st.floats(min_value=0.2, max_value=0.3), min_size=1, max_size=3),
    st.floats(min_value=-0.01, max_value=0.01),
    st.floats(min_value=-0.3, max_value=0.3),
)
def test_evaluate_success_is_mirror_symmetric(planes, offset, tilt):
    center, length = 0.25, 0.12
    target = sorted(planes)
    achieved = [p + offset for p in target]
    blade = np.array([np.cos(tilt), np.sin(tilt), 0.0])
    axis = np.array([1.0, 0.0, 0.0])
    mirror = np.diag([-1.0, 1.0, 1.0])
    verdict = evaluate_success(achieved, target, length, blade, axis)
    mirrored = evaluate_success([2 * center - p for p in achieved], [2 * center - p for p in target], length, mirror @ blade, mirror @ axis)
    assert mirrored.success == verdict.success
    assert mirrored.reason == verdict.reason
    assert mirrored.planes_within_tolerance == verdict.planes_within_tolerance
    assert mirrored.angle_error == pytest.approx(verdict.angle_error)


def test_evaluate_success_requires_separated_pieces():
    axis = [1.0, 0.0, 0.0]
    stuck = evaluate_success([0.5], [0.5], 1.0, axis, axis, segments=1)
    assert not stuck.success and stuck.reason == "not separated"
    assert stuck.plane_errors == (0.0,)
    assert evaluate_success([0.5], [0.5], 1.0, axis, axis, segments=2).success
    split = evaluate_success([0.25, 0.5, 0.75], [0.25, 0.5, 0.75], 1.0, axis, axis, segments=3)
    assert split.reason == "not separated"
    assert evaluate_success([0.25, 0.5, 0.75], [0.25, 0.5, 0.75], 1.0, axis, axis, segments=4).success


def test_augment_with_fixed_ranges_reproduces_the_scene():
    scene = SceneSpec(seed=3)
    task = CutTask()
    out_scene, out_task = augment(task, AugmentRanges.fixed(scene, task), 3, base_scene=scene)
    assert out_scene == scene
    assert out_task == task


def test_augment_with_fixed_ranges_keeps_the_scene_seed():
    scene = SceneSpec(seed=42)
    task = CutTask()
    ranges = AugmentRanges.fixed(scene, task)
    assert ranges.pinned
    for seed in (0, 7):
        out_scene, _ = augment(task, ranges, seed, base_scene=scene)
        assert out_scene.seed == 42
    assert not AugmentRanges.around(scene, task).pinned
    assert augment(task, AugmentRanges.around(scene, task), 7, scene)[0].seed == 7


def test_augment_is_deterministic_per_seed():
    scene, task = SceneSpec(), CutTask()
    ranges = AugmentRanges.around(scene, task)
    assert augment(task, ranges, 11, scene) == augment(task, ranges, 11, scene)
    assert augment(task, ranges, 11, scene) != augment(task, ranges, 12, scene)


def test_augmented_objects_stay_in_the_workspace():
    scene, task = SceneSpec(), CutTask()
    ranges = AugmentRanges.around(scene, task)
    config = SimConfig()
    for seed in range(500):
        sampled, _ = augment(task, ranges, seed, scene, config)
        assert aabb_in_workspace(object_aabb(sampled), config)


def test_augment_rejects_inverted_ranges():
    scene, task = SceneSpec(), CutTask()
    ranges = replace(AugmentRanges.fixed(scene, task), v=(0.4, 0.2))
    with pytest.raises(ConfigError):
        augment(task, ranges, 0, scene)


def test_trajectory_frame_round_trip():
    traj = generate_trajectory(CutTask("Bias"), [0.25], AABB)
    assert Trajectory.from_frame(traj.to_frame()).same_path(traj)


def test_trajectory_frame_keeps_style_parameters_and_bounds():
    traj = generate_trajectory(CutTask("Saw"), [0.25], AABB, StyleParams(saw_frequency=3.0, blade_length=0.1))
    stored = {**vars(traj.params), "saw_frequency_range": list(traj.params.saw_frequency_range)}
    back = Trajectory.from_frame(traj.to_frame(), StyleParams.from_dict(stored), [AABB[0].tolist(), AABB[1].tolist()])
    assert back.params == traj.params
    assert back.params.blade_length == 0.1
    assert np.array_equal(back.aabb[0], AABB[0]) and np.array_equal(back.aabb[1], AABB[1])
    assert back.same_path(traj)
    with pytest.raises(ConfigError):
        StyleParams.from_dict({"bias": 0.3})


def test_trajectory_rejects_non_increasing_time():
    with pytest.raises(PlanningError):
        Trajectory(t=[0.0, 0.0], position=np.zeros((2, 3)), quat=[[1.0, 0, 0, 0]] * 2, v_cmd=[0.0, 0.0], phase=["approach"] * 2)
