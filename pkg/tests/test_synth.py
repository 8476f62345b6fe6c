import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdeblur.events_io import ImagePlane, parse_event_csv
from evdeblur.synth import (
    EventModel,
    Scene,
    exposure_timestamps,
    generate_events,
    integrate_blur,
    make_dataset,
    make_pattern,
    render_sequence,
    shift_wrap,
    synthesize,
)

from evdeblur.synth import PATTERNS


class TestScene:
    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            Scene(frames=1)

    def test_unknown_pattern(self):
        with pytest.raises(ValueError):
            Scene(pattern="stripes")

    def test_contrast_positive(self):
        with pytest.raises(ValueError):
            EventModel(contrast=0.0)

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_pattern_deterministic(self, pattern):
        s = Scene(pattern, seed=4, height=16, width=20)
        a, b = make_pattern(s), make_pattern(s)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (16, 20, 3) and a.min() >= 0 and a.max() <= 1


class TestRender:
    def test_static_frames_identical(self):
        frames = render_sequence(Scene("textured-noise", (0.0, 0.0), frames=5, height=16, width=16))
        for f in frames[1:]:
            np.testing.assert_array_equal(f.data, frames[0].data)

    def test_wraparound_period(self):
        W = 16
        frames = render_sequence(Scene("checker", (W / 4, 0.0), frames=5, height=8, width=W))
        np.testing.assert_array_equal(frames[4].data, frames[0].data)

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_mean_preserved(self, pattern):
        frames = render_sequence(Scene(pattern, (0.37, -1.21), frames=9, height=24, width=20, seed=1))
        means = [f.data.mean() for f in frames]
        assert max(means) - min(means) < 1e-6

    def test_integer_shift_is_roll(self):
        img = np.random.default_rng(0).random((5, 7, 1))
        np.testing.assert_array_equal(shift_wrap(img, 2, -1), np.roll(img, (-1, 2), axis=(0, 1)))


class TestBlur:
    def test_single_frame(self):
        x = np.random.default_rng(0).random((4, 4, 3))
        np.testing.assert_array_equal(integrate_blur([ImagePlane(x)]).data, x)

    def test_two_frames(self):
        assert integrate_blur([np.zeros((1, 1)), np.ones((1, 1))]).data[0, 0, 0] == 0.5

    def test_static_scene_blur_equals_sharp(self):
        sharp, blur, events = synthesize(Scene("gradient", (0.0, 0.0), height=16, width=16))
        np.testing.assert_array_equal(blur.data, sharp.data)
        assert len(events) == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            integrate_blur([])


def single_pixel(levels, eps=1e-3):
    """Frames of one gray pixel whose log intensity follows ``levels``."""
    return [np.full((1, 1), np.exp(v) - eps) for v in levels]


class TestEvents:
    def test_static_scene(self):
        frames = [np.full((3, 3), 0.4)] * 4
        assert len(generate_events(frames, EventModel(), [0, 10, 20, 30])) == 0

    def test_two_and_a_half_thresholds(self):
        C = 0.2
        ev = generate_events(single_pixel([-1.0, -1.0 + 2.5 * C]), EventModel(C), [0, 100])
        assert len(ev) == 2
        assert list(ev.p) == [1, 1]
        # crossings at 1/2.5 and 2/2.5 of the interval
        assert list(ev.t) == [40, 80]

    def test_reference_carries_over(self):
        C = 0.2
        ev = generate_events(single_pixel([-1.0, -1.0 + 1.5 * C, -1.0 + 2.1 * C]), EventModel(C), [0, 100, 200])
        assert len(ev) == 2 and ev.t[1] > 100

    def test_timestamps_must_increase(self):
        with pytest.raises(ValueError):
            generate_events([np.zeros((1, 1))] * 2, EventModel(), [5, 5])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-0.9, 0.9), min_size=2, max_size=6), st.integers(0, 2 ** 16))
    def test_reversal_flips_polarity(self, steps, seed):
        # per-pixel monotone sequences: reversing time mirrors the crossings
        rng = np.random.default_rng(seed)
        n = len(steps) + 1
        start = rng.uniform(-3, -1, (2, 3))
        sign = rng.choice([-1, 1], (2, 3))
        incr = np.abs(np.array(steps))[:, None, None] * sign
        levels = np.concatenate([start[None], start + np.cumsum(incr, axis=0)])
        frames = [np.exp(l) for l in levels]
        ts = np.arange(n) * 1000
        model = EventModel(0.2, log_eps=0.0)
        fwd = generate_events(frames, model, ts)
        bwd = generate_events(frames[::-1], model, ts)
        # same pixel multiset, opposite polarity
        key = lambda s, flip: sorted(zip(s.x.tolist(), s.y.tolist(), (flip * s.p).tolist()))
        assert key(fwd, 1) == key(bwd, -1)

    def test_count_monotone_in_contrast(self):
        frames = render_sequence(Scene("textured-noise", (1.3, 0.4), height=24, width=24, seed=2))
        ts = exposure_timestamps(len(frames))
        counts = [len(generate_events(frames, EventModel(c), ts)) for c in (0.4, 0.3, 0.2, 0.1, 0.05)]
        assert all(a <= b for a, b in zip(counts, counts[1:]))
        assert counts[-1] > counts[0]

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_events_valid(self, pattern):
        _, _, ev = synthesize(Scene(pattern, (1.1, -0.7), height=20, width=24, seed=3))
        assert len(ev) > 0
        ev.validate()
        assert ev.window == (0, 40_000)
        assert np.all(np.diff(ev.t) >= 0)


class TestDataset:
    def test_empty(self, tmp_path):
        manifest = make_dataset(0, tmp_path / "d")
        assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["manifest.csv"]
        assert manifest.read_text() == "name,pattern,vx,vy,frames,C,seed\n"

    def test_deterministic_bytes(self, tmp_path):
        make_dataset(3, tmp_path / "a", seed=5, size=(16, 16))
        make_dataset(3, tmp_path / "b", seed=5, size=(16, 16))
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 10
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_events_parse(self, tmp_path):
        make_dataset(4, tmp_path, seed=6, size=(16, 16))
        for path in sorted(tmp_path.glob("*.events.csv")):
            s = parse_event_csv(path.read_bytes())
            s.validate()
            assert (s.width, s.height) == (16, 16)
