import json

import numpy as np
import pytest

from puckloc.data import load_events
from puckloc.rink import THREE_ZONES, RinkPoint, zone_indices
from puckloc.synth import (
    CameraState,
    ScenarioConfig,
    ScenarioError,
    dataset_checksum,
    generate_clip,
    generate_dataset,
    load_scenario_echo,
    pinhole_camera,
    project_point,
    simulate_clip,
    to_uint8_hwc,
)

from . import oracles

STILL = dict(static_camera=True, puck_start=(100.0, 42.5), puck_velocity=(0.0, 0.0), n_occluders=0)


def test_degenerate_scenario_frames_identical():
    clip = generate_clip(ScenarioConfig(rng_seed=0, clip_len=12, frame_size=48, **STILL))
    assert clip.truth == RinkPoint(100.0, 42.5)
    for f in clip.frames[1:]:
        np.testing.assert_array_equal(f, clip.frames[0])
    # the puck is drawn: the darkest pixel is near the projected centre
    u, v, vis = project_point(clip.cameras[0], (100.0, 42.5))
    assert vis
    lum = clip.frames[0].mean(axis=0)
    r, c = np.unravel_index(lum.argmin(), lum.shape)
    assert abs(c + 0.5 - u) <= 2 and abs(r + 0.5 - v) <= 2


def test_same_seed_bit_identical():
    cfg = ScenarioConfig(rng_seed=9, clip_len=10, frame_size=40)
    a, b = generate_clip(cfg, 3), generate_clip(cfg, 3)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.truth == b.truth
    assert generate_clip(cfg, 4).truth != a.truth


def test_output_contract():
    clip = generate_clip(ScenarioConfig(rng_seed=1, clip_len=6, frame_size=32), 0)
    assert clip.frames.shape == (6, 3, 32, 32) and clip.frames.dtype == np.float32
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    u8 = to_uint8_hwc(clip.frames)
    assert u8.shape == (6, 32, 32, 3) and u8.dtype == np.uint8


def test_label_is_midpoint_position():
    cfg = ScenarioConfig(rng_seed=2, clip_len=30, puck_start=(50.0, 20.0), puck_velocity=(30.0, 0.0),
                         n_occluders=0)
    sc = simulate_clip(cfg)
    # frame 15 at 60 fps is a quarter second in, at 30 ft/s
    assert sc.truth.x == pytest.approx(57.5) and sc.truth.y == pytest.approx(20.0)


def test_puck_reflects_off_boards():
    cfg = ScenarioConfig(rng_seed=2, clip_len=60, puck_start=(195.0, 40.0), puck_velocity=(60.0, 0.0),
                         n_occluders=0, impulse_prob=0.0)
    sc = simulate_clip(cfg)
    xy = sc.puck.at(sc.frame_times())
    assert xy[:, 0].max() <= 200 and xy[:, 0].min() >= 0
    assert sc.truth.x == pytest.approx(200 - (195 + 30 - 200))


def test_truth_spans_all_zones():
    cfg = ScenarioConfig(rng_seed=0)
    xs = [simulate_clip(cfg, i).truth.x for i in range(1000)]
    share = np.bincount(zone_indices(xs, THREE_ZONES), minlength=3) / 1000
    assert share.min() >= 0.20


def test_truth_spread():
    cfg = ScenarioConfig(rng_seed=0)
    pts = np.array([simulate_clip(cfg, i).truth.as_array() for i in range(500)])
    d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    assert d.min(axis=1).mean() > 3.0


def test_occlusion_allowance_respected():
    cfg = ScenarioConfig(rng_seed=4, clip_len=30, n_occluders=12)
    for i in range(10):
        assert simulate_clip(cfg, i).hidden.mean() <= cfg.occlusion_allowance


def test_impossible_occlusion_raises():
    cfg = ScenarioConfig(rng_seed=0, clip_len=10, n_occluders=0, static_camera=True, pan_start=40.0,
                         puck_start=(190.0, 40.0), puck_velocity=(0.0, 0.0), occlusion_allowance=0.0,
                         max_attempts=2)
    with pytest.raises(ScenarioError):
        simulate_clip(cfg)


@pytest.mark.parametrize(
    "bad",
    [dict(clip_len=0), dict(puck_speed_range=(0, 200)), dict(puck_start=(250, 3)), dict(zoom_range=(2, 1)),
     dict(puck_diameter_px=9), dict(occlusion_allowance=1.5)],
)
def test_config_validation(bad):
    with pytest.raises(ScenarioError):
        ScenarioConfig(**bad)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_dict({"clip_len": 5, "colour": "red"})
    assert ScenarioConfig.from_dict({"zoom_range": [1, 1.1]}).zoom_range == (1, 1.1)


def test_identity_like_homography_corners():
    s = 64
    cam = CameraState(100.0, 1.0, np.diag([s / 200, s / 85, 1.0]), s)
    for (x, y), (u, v) in [((0, 0), (0, 0)), ((200, 0), (s, 0)), ((0, 85), (0, s)), ((200, 85), (s, s))]:
        p = project_point(cam, (x, y))
        assert (p.u, p.v) == pytest.approx((u, v), abs=1e-12) and p.in_view


def test_homography_matches_hand_multiplication():
    H = [[1.7, -0.3, 12.0], [0.2, 2.1, -4.0], [0.001, 0.004, 1.0]]
    cam = CameraState(0.0, 1.0, np.array(H), 512)
    for x, y in [(10, 20), (150.5, 3.25), (199, 84)]:
        u, v, _ = oracles.homography_apply(H, x, y)
        p = project_point(cam, (x, y))
        assert abs(p.u - u) < 1e-9 and abs(p.v - v) < 1e-9


def test_point_behind_camera_out_of_view():
    cam = CameraState(0.0, 1.0, np.array([[1, 0, 0], [0, 1, 0], [0, -0.1, 1.0]]), 64)
    p = project_point(cam, (10, 20))
    assert not p.in_view and np.isnan(p.u)


def test_singular_homography_rejected():
    with pytest.raises(ScenarioError):
        CameraState(0.0, 1.0, np.zeros((3, 3)), 64)


def test_broadcast_camera_sees_centre_ice():
    cfg = ScenarioConfig()
    cam = pinhole_camera(100.0, 1.0, cfg)
    c = project_point(cam, (100.0, 42.5))
    assert c.in_view and c.u == pytest.approx(cfg.frame_size / 2)
    near, far = project_point(cam, (100, 5)), project_point(cam, (100, 80))
    assert near.v > far.v  # near boards at the bottom of the frame


def test_dataset_on_disk(tmp_path):
    cfg = ScenarioConfig(rng_seed=7, clip_len=4, frame_size=24)
    m = generate_dataset(10, cfg, tmp_path / "a")
    assert len(list((tmp_path / "a" / "clips").iterdir())) == 10
    assert all(len(list(d.iterdir())) == 4 for d in m.clip_dirs.values())
    assert load_events(m.events_path) == m.records
    assert load_scenario_echo(tmp_path / "a" / "scenario.json") == cfg
    assert json.loads((tmp_path / "a" / "scenario.json").read_text())["rng_seed"] == 7
    m2 = generate_dataset(10, cfg, tmp_path / "b")
    assert m.checksum() == m2.checksum() == dataset_checksum(tmp_path / "b")
    generate_dataset(10, ScenarioConfig(rng_seed=8, clip_len=4, frame_size=24), tmp_path / "c")
    assert dataset_checksum(tmp_path / "c") != m.checksum()


def test_unwritable_dataset_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(2, ScenarioConfig(clip_len=2, frame_size=16), blocker / "ds")
    assert not (blocker.parent / "manifest.csv").exists()
