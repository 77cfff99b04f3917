import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from pretram.patchlib import (
    crop_agent_patch,
    crop_patches,
    denormalize_history,
    joint_rotate,
    make_mcl_positive,
    normalize_history,
    sample_decoupled_patches,
)
from pretram.scenegen import (
    PEDESTRIAN,
    VEHICLE,
    AgentTrack,
    MapConfig,
    Palette,
    generate_map,
    generate_scene,
    road_pixels,
)


@pytest.fixture(scope="module")
def smap():
    return generate_map(2)


def oracle_patch(smap, position, heading, c):
    """Per-pixel inverse rotation: patch (row i, col j) -> world point -> map pixel."""
    out = np.zeros((c, c, 3), dtype=np.uint8)
    res = smap.resolution
    for i in range(c):
        for j in range(c):
            fwd = (j - c / 2 + 0.5) * res
            left = (i - c / 2 + 0.5) * res
            wx = position[0] + fwd * math.cos(heading) - left * math.sin(heading)
            wy = position[1] + fwd * math.sin(heading) + left * math.cos(heading)
            r, q = math.floor(wy / res), math.floor(wx / res)
            if 0 <= r < smap.height_px and 0 <= q < smap.width_px:
                out[i, j] = smap.pixels[r, q]
            else:
                out[i, j] = Palette.BACKGROUND
    return out


def make_track(points, agent_type=VEHICLE):
    pts = np.asarray(points, dtype=np.float64)
    d = np.diff(pts, axis=0, prepend=pts[:1] - [1e-3, 0])
    theta = np.arctan2(d[:, 1], d[:, 0])
    speed = np.linalg.norm(d, axis=1) / 0.5
    return AgentTrack(agent_type, np.column_stack([pts, np.cos(theta), np.sin(theta), speed]))


class TestCropping:
    def test_heading_zero_is_window_copy(self, smap):
        c = 16
        r0, c0 = 100, 80
        pos = np.array([c0, r0]) * smap.resolution  # pixel corner
        patch = crop_agent_patch(smap, pos, 0.0, c)
        np.testing.assert_array_equal(patch.pixels, smap.pixels[r0 - c // 2 : r0 + c // 2, c0 - c // 2 : c0 + c // 2])

    @pytest.mark.parametrize("quarter", [1, 2, 3])
    def test_quarter_turns_are_rot90(self, smap, quarter):
        pos = np.array([60.0, 55.0])
        p0 = crop_agent_patch(smap, pos, 0.0, 32).pixels
        pq = crop_agent_patch(smap, pos, quarter * np.pi / 2, 32).pixels
        np.testing.assert_array_equal(pq, np.rot90(p0, quarter))

    @pytest.mark.parametrize("heading", [0.0, np.pi / 2, np.pi, 3 * np.pi / 2])
    def test_cardinal_headings_match_oracle(self, smap, heading):
        pos = (61.0, 47.5)
        np.testing.assert_array_equal(crop_agent_patch(smap, pos, heading, 24).pixels, oracle_patch(smap, pos, heading, 24))

    def test_arbitrary_headings_match_oracle(self, smap):
        rng = np.random.default_rng(0)
        for _ in range(5):
            pos = rng.uniform(10, 110, 2)
            h = rng.uniform(0, 2 * np.pi)
            np.testing.assert_array_equal(crop_agent_patch(smap, pos, h, 20).pixels, oracle_patch(smap, pos, h, 20))

    def test_corner_is_mostly_background(self, smap):
        px = crop_agent_patch(smap, (0.0, 0.0), 0.0, 32).pixels
        bg = np.all(px == Palette.BACKGROUND, axis=-1).mean()
        assert bg >= 0.25

    def test_batched_matches_single(self, smap):
        centers = np.array([[30.0, 40.0], [70.2, 33.3]])
        heads = np.array([0.3, 4.0])
        batch = crop_patches(smap, centers, heads, 16)
        for k in range(2):
            np.testing.assert_array_equal(batch[k], crop_agent_patch(smap, centers[k], heads[k], 16).pixels)

    def test_context_too_small(self, smap):
        with pytest.raises(ValueError):
            crop_agent_patch(smap, (10.0, 10.0), 0.0, 4)

    def test_pixels_stay_in_palette(self, smap):
        px = crop_patches(smap, np.array([[55.0, 66.0]]), np.array([1.234]), 64)
        assert {tuple(c) for c in px.reshape(-1, 3)} <= set(Palette.ALL)


class TestDecoupled:
    def test_centers_drivable_and_deterministic(self, smap):
        a = sample_decoupled_patches(smap, 50, seed=4, c=16)
        b = sample_decoupled_patches(smap, 50, seed=4, c=16)
        assert all(np.array_equal(x.pixels, y.pixels) and x.orientation == y.orientation for x, y in zip(a, b))
        centers = np.array([p.center_world for p in a])
        assert smap.on_road(centers).all()
        assert all(0 <= p.orientation < 2 * np.pi for p in a)

    def test_nonpositive_count(self, smap):
        with pytest.raises(ValueError):
            sample_decoupled_patches(smap, 0, seed=0)

    def test_center_uniformity_chi_square(self):
        small = generate_map(7, MapConfig(size_px=64, resolution=1.0, lattice_spacing=24.0))
        n = 10_000
        patches = sample_decoupled_patches(small, n, seed=1, c=8)
        road = road_pixels(small.pixels)
        rows, cols = np.nonzero(road)
        index = -np.ones(road.shape, dtype=np.int64)
        index[rows, cols] = np.arange(rows.size)
        centers = np.array([p.center_world for p in patches])
        r, q = small.world_to_pixel(centers)
        counts = np.bincount(index[r, q], minlength=rows.size)
        assert counts.sum() == n
        assert chisquare(counts).pvalue > 0.01


class TestNormalization:
    def test_stationary_agent(self):
        states = np.tile([12.0, -3.0, np.cos(0.7), np.sin(0.7), 0.0], (17, 1))
        for kind, flag in ((VEHICLE, 1.0), (PEDESTRIAN, 0.0)):
            rows = normalize_history(AgentTrack(kind, states)).rows
            np.testing.assert_allclose(rows, np.tile([0, 0, 1, 0, 0, flag], (5, 1)), atol=1e-12)

    def test_round_trip(self, smap):
        for track in generate_scene(smap, 3).agents:
            h = normalize_history(track)
            np.testing.assert_allclose(denormalize_history(h), track.states[:5], atol=1e-9, rtol=0)
            np.testing.assert_allclose(h.rows[-1, :2], 0.0, atol=1e-9)
            np.testing.assert_allclose(h.rows[-1, 2:4], [1.0, 0.0], atol=1e-6)
            np.testing.assert_array_equal(h.rows[:, 4], track.states[:5, 4])

    def test_translation_invariance(self):
        pts = np.column_stack([np.linspace(0, 10, 17), 0.2 * np.linspace(0, 10, 17) ** 1.2])
        a = normalize_history(make_track(pts)).rows
        b = normalize_history(make_track(pts + [57.3, -12.9])).rows
        np.testing.assert_allclose(a, b, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(
        angle=st.floats(0, 2 * np.pi),
        shift=st.tuples(st.floats(-100, 100), st.floats(-100, 100)),
        seed=st.integers(0, 1000),
    )
    def test_rigid_motion_invariance(self, angle, shift, seed):
        rng = np.random.default_rng(seed)
        pts = np.cumsum(rng.uniform(0.5, 2.0, (17, 2)), axis=0)
        track = make_track(pts)
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        moved = track.states.copy()
        moved[:, :2] = pts @ rot.T + shift
        moved[:, 2:4] = track.states[:, 2:4] @ rot.T
        a = normalize_history(track).rows
        b = normalize_history(AgentTrack(VEHICLE, moved)).rows
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestJointRotate:
    def test_angle_zero_identity(self, smap):
        track = generate_scene(smap, 1).agents[0]
        rotated, offset = joint_rotate(track, 0.25, 0.0)
        np.testing.assert_array_equal(rotated.states, track.states)
        assert offset == 0.25

    def test_pi_twice_is_identity(self, smap):
        track = generate_scene(smap, 1).agents[0]
        once, off = joint_rotate(track, 0.0, np.pi)
        twice, off2 = joint_rotate(once, off, np.pi)
        np.testing.assert_allclose(twice.states, track.states, atol=1e-9)
        assert math.isclose(math.remainder(off2, 2 * math.pi), 0.0, abs_tol=1e-12)

    def test_agent_frame_invariance(self, smap):
        rng = np.random.default_rng(5)
        for track in generate_scene(smap, 2).agents:
            rotated, _ = joint_rotate(track, 0.0, rng.uniform(0, 2 * np.pi))
            np.testing.assert_allclose(normalize_history(rotated).rows, normalize_history(track).rows, atol=1e-6)

    def test_pair_consistency(self, smap):
        track = generate_scene(smap, 4).agents[0]
        h0 = normalize_history(track)
        patch0 = crop_agent_patch(smap, h0.origin, h0.heading + 0.0, 24).pixels
        rotated, offset = joint_rotate(track, 0.0, 1.1)
        h1 = normalize_history(rotated)
        patch1 = crop_agent_patch(smap, h0.origin, h1.heading + offset, 24).pixels
        np.testing.assert_allclose(h1.origin, h0.origin, atol=1e-12)
        np.testing.assert_array_equal(patch1, patch0)


class TestMclPositive:
    @pytest.fixture
    def patch(self, smap):
        return crop_agent_patch(smap, (50.0, 50.0), 0.4, 32)

    def test_dropout_is_identity(self, patch):
        out = make_mcl_positive(patch, "dropout", 3)
        assert out.pixels.tobytes() == patch.pixels.tobytes()

    def test_flip_involution(self, patch):
        twice = make_mcl_positive(make_mcl_positive(patch, "flip", 0), "flip", 1)
        np.testing.assert_array_equal(twice.pixels, patch.pixels)

    def test_gaussian_noise_range(self, patch):
        out = make_mcl_positive(patch, "gaussian_noise", 2).pixels
        assert out.min() >= 0 and out.max() <= 255
        palette = np.array(Palette.ALL, dtype=np.float64)
        off = ~np.any(np.all(out.reshape(-1, 1, 3) == palette, axis=-1), axis=-1)
        assert off.mean() > 0.5

    @pytest.mark.parametrize("mode", ["rotation", "color_jitter", "gaussian_noise", "flip"])
    def test_deterministic(self, patch, mode):
        assert np.array_equal(make_mcl_positive(patch, mode, 9).pixels, make_mcl_positive(patch, mode, 9).pixels)

    def test_unknown_mode(self, patch):
        with pytest.raises(ValueError):
            make_mcl_positive(patch, "cutout", 0)
