"""Scene rendering and event emission against brute-force oracles."""

import numpy as np
import pytest

from evdiff.errors import ParameterError, RangeError
from evdiff.sim import (
    LOG_FLOOR,
    SceneObject,
    SceneSpec,
    emit_events,
    moving_square_suite,
    object_mask,
    render_scene,
    sampled_log_change,
)


def square_scene(velocity=(0.0, 0.0), intensity=0.7, background=0.3, size=(4, 4),
                 position=(8.5, 8.5), duration_us=10_000, canvas=16):
    return SceneSpec(
        width=canvas,
        height=canvas,
        duration_us=duration_us,
        background=background,
        objects=[SceneObject("rectangle", size, position, velocity, 0.0, intensity)],
    )


def brute_force_events(log_trace, threshold):
    """Reference per-pixel threshold integrator over a (T, H, W) log trace.

    Scalar transcription of the crossing rule: per interval, the count of
    k * threshold levels passed beyond the reference, which then advances
    by count * threshold.  No vectorization, no timestamp interpolation.
    """
    import math

    n, h, w = log_trace.shape
    ref = log_trace[0].copy()
    out = []
    for k in range(1, n):
        for y in range(h):
            for x in range(w):
                d = log_trace[k, y, x] - ref[y, x]
                count = int(math.floor(abs(d) / threshold))
                if count:
                    sign = 1 if d > 0 else -1
                    out.extend([(k, y, x, sign)] * count)
                    ref[y, x] += count * threshold * sign
    return out


class TestRenderScene:
    def test_static_scene_time_invariant(self):
        spec = square_scene()
        assert np.array_equal(render_scene(spec, 0), render_scene(spec, 7000))

    def test_initial_positions_at_t0(self):
        spec = square_scene(velocity=(1000.0, 0.0))
        frame = render_scene(spec, 0)
        ys, xs = np.nonzero(frame == 0.7)
        assert xs.min() == 7 and xs.max() == 10
        assert ys.min() == 7 and ys.max() == 10

    def test_translation_by_velocity(self):
        # 1000 px/s for 5000 us -> exactly 5 px to the right.
        spec = square_scene(velocity=(1000.0, 0.0))
        moved = render_scene(spec, 5000)
        assert np.array_equal(moved, np.roll(render_scene(spec, 0), 5, axis=1))

    def test_out_of_range_time(self):
        spec = square_scene()
        with pytest.raises(RangeError):
            render_scene(spec, spec.duration_us + 1)
        with pytest.raises(RangeError):
            render_scene(spec, -1)

    def test_values_clamped(self):
        spec = square_scene(intensity=1.0, background=0.0)
        frame = render_scene(spec, 0)
        assert frame.min() >= 0.0 and frame.max() <= 1.0


class TestObjectMask:
    def test_empty_scene_all_false(self):
        spec = SceneSpec(width=8, height=8, duration_us=1000)
        assert not object_mask(spec, 0).any()

    def test_square_area_count(self):
        # 4x4 square centered on a half-integer grid covers exactly 16 centers.
        spec = square_scene()
        assert int(object_mask(spec, 0).sum()) == 16

    def test_matches_render_occupancy_when_moving(self):
        spec = square_scene(velocity=(1000.0, 400.0))
        t = 5000
        mask = object_mask(spec, t)
        assert np.array_equal(mask, render_scene(spec, t) == 0.7)


class TestEmitEvents:
    def test_static_scene_silent(self):
        stream = emit_events(square_scene(), threshold=0.15, dt_us=100)
        assert len(stream) == 0

    def test_step_of_exactly_two_thresholds(self):
        # Background chosen so log(bg + floor) == 0; the threshold is half
        # the actual log step, making the crossing count arithmetic exact.
        bg = 1.0 - LOG_FLOOR
        obj = 0.5
        spec = SceneSpec(
            width=8,
            height=8,
            duration_us=100,
            background=bg,
            objects=[SceneObject("rectangle", (2, 2), (3.5, 3.5), (20000.0, 0.0), 0.0, obj)],
        )
        # Pixel (y=4, x=5) is uncovered at t=0 and covered at t=100.
        assert not object_mask(spec, 0)[4, 5]
        assert object_mask(spec, 100)[4, 5]
        delta = np.log(obj + LOG_FLOOR) - np.log(bg + LOG_FLOOR)
        threshold = abs(delta) / 2.0
        stream = emit_events(spec, threshold=threshold, dt_us=100)
        at_pixel = stream.events[(stream.events["x"] == 5) & (stream.events["y"] == 4)]
        assert len(at_pixel) == 2
        assert np.all(at_pixel["p"] == -1)  # object darker than background

    def test_against_brute_force_integrator(self):
        spec = square_scene(velocity=(700.0, 300.0), duration_us=4000)
        dt = 200
        trace = np.log(
            np.stack([render_scene(spec, k * dt) for k in range(spec.duration_us // dt + 1)])
            + LOG_FLOOR
        )
        expected = brute_force_events(trace, 0.15)
        stream = emit_events(spec, threshold=0.15, dt_us=dt)
        got = [
            ((int(e["t"]) + dt - 1) // dt, int(e["y"]), int(e["x"]), int(e["p"]))
            for e in stream.events
        ]
        assert sorted(got) == sorted(expected)

    def test_mirror_scene_negates_polarities(self):
        # Intensities symmetric around 0.5, so the mirrored scene swaps the
        # same two log levels and every delta negates exactly.
        spec = square_scene(velocity=(800.0, 0.0), intensity=0.7, background=0.3,
                            duration_us=5000)
        mirror = square_scene(velocity=(800.0, 0.0), intensity=0.3, background=0.7,
                              duration_us=5000)
        a = emit_events(spec, threshold=0.1, dt_us=100)
        b = emit_events(mirror, threshold=0.1, dt_us=100)
        assert len(a) == len(b) > 0
        assert np.array_equal(a.events["x"], b.events["x"])
        assert np.array_equal(a.events["y"], b.events["y"])
        assert np.array_equal(a.events["t"], b.events["t"])
        assert np.array_equal(a.events["p"], -b.events["p"].astype(np.int16))

    def test_invalid_threshold(self):
        with pytest.raises(ParameterError):
            emit_events(square_scene(), threshold=0.0)

    def test_determinism(self):
        spec = square_scene(velocity=(600.0, -200.0))
        a = emit_events(spec, threshold=0.15, dt_us=100)
        b = emit_events(spec, threshold=0.15, dt_us=100)
        assert np.array_equal(a.events, b.events)

    def test_halving_threshold_never_loses_events(self):
        for speed in (300.0, 800.0, 1500.0):
            spec = square_scene(velocity=(speed, speed / 3), duration_us=5000)
            n_coarse = len(emit_events(spec, threshold=0.2, dt_us=100))
            n_fine = len(emit_events(spec, threshold=0.1, dt_us=100))
            assert n_fine >= n_coarse > 0

    def test_round_trip_threshold_bound(self):
        spec = square_scene(velocity=(900.0, 500.0), duration_us=5000)
        threshold, dt = 0.15, 100
        stream = emit_events(spec, threshold=threshold, dt_us=dt)
        trace = sampled_log_change(spec, dt_us=dt)
        acc = np.zeros((spec.height, spec.width))
        t = stream.events["t"].astype(np.int64)
        for k in range(1, spec.duration_us // dt + 1):
            sel = stream.events[(t > (k - 1) * dt) & (t <= k * dt)]
            np.add.at(acc, (sel["y"].astype(int), sel["x"].astype(int)), sel["p"])
            assert np.all(np.abs(trace[k] - threshold * acc) <= threshold)


class TestCameraShake:
    def shaken(self):
        return SceneSpec(
            width=16, height=16, duration_us=20_000, background=0.3,
            objects=[SceneObject("disk", (6, 6), (8.0, 8.0), (0.0, 0.0), 0.0, 0.8)],
            shake_amplitude=2.0, shake_frequency=50.0, seed=11,
        )

    def test_shake_moves_a_static_object(self):
        spec = self.shaken()
        frames = [render_scene(spec, t) for t in (0, 5000, 10_000)]
        assert not np.array_equal(frames[0], frames[1])
        stream = emit_events(spec, threshold=0.15, dt_us=100)
        assert len(stream) > 0

    def test_shake_deterministic_in_seed(self):
        a = emit_events(self.shaken(), threshold=0.15, dt_us=100)
        b = emit_events(self.shaken(), threshold=0.15, dt_us=100)
        assert np.array_equal(a.events, b.events)
        other = self.shaken()
        other.seed = 12  # different phases, different events
        c = emit_events(other, threshold=0.15, dt_us=100)
        assert not np.array_equal(a.events, c.events)


class TestSuite:
    def test_manifest_size_and_determinism(self):
        scenes = moving_square_suite(10, seed=42)
        again = moving_square_suite(10, seed=42)
        assert len(scenes) == 10
        assert scenes[3].to_json() == again[3].to_json()

    def test_objects_stay_inside(self):
        for spec in moving_square_suite(5, seed=7):
            for t in (0, spec.duration_us // 2, spec.duration_us):
                mask = object_mask(spec, t)
                assert mask.any()
                assert not mask[0, :].any() and not mask[-1, :].any()
                assert not mask[:, 0].any() and not mask[:, -1].any()

    def test_scene_spec_json_round_trip(self):
        spec = moving_square_suite(1, seed=3)[0]
        clone = SceneSpec.from_json(spec.to_json())
        assert clone.to_json() == spec.to_json()
