"""Moving-shape generator, dataset file format and batching."""

import hashlib

import numpy as np
import pytest
import torch

from rwae.data import (
    MOTIONS,
    SHAPES,
    GeneratorConfig,
    batch_indices,
    batches,
    frames_in_unit_range,
    generate_dataset,
    load_dataset,
    render,
    save_dataset,
    shape_mask,
    split,
    trajectory,
)
from rwae.errors import FormatError, InvalidArgumentError


def centroid(frame):
    rows, cols = np.nonzero(frame > 0)
    return np.array([rows.mean(), cols.mean()])


def mask_of(frame):
    """Foreground mask cropped to its bounding box, plus the box corner."""
    rows, cols = np.nonzero(frame > 0)
    r0, c0 = rows.min(), cols.min()
    return frame[r0 : rows.max() + 1, c0 : cols.max() + 1] > 0, (r0, c0)


@pytest.fixture(scope="module")
def default_data():
    return generate_dataset(GeneratorConfig(n_sequences=600, motions=MOTIONS, seed=3))


class TestGenerator:
    def test_same_seed_same_bytes(self):
        cfg = GeneratorConfig(n_sequences=50, seed=7)
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert np.array_equal(a.content, b.content) and np.array_equal(a.motion, b.motion)

    def test_different_seed_differs(self):
        a = generate_dataset(GeneratorConfig(n_sequences=20, seed=1))
        b = generate_dataset(GeneratorConfig(n_sequences=20, seed=2))
        assert a.frames.tobytes() != b.frames.tobytes()

    def test_shapes_and_range(self, default_data):
        assert default_data.frames.shape == (600, 8, 1, 16, 16)
        assert default_data.frames.dtype == np.float32
        assert frames_in_unit_range(default_data.frames)
        assert set(np.unique(default_data.frames)) <= {0.0, 1.0}

    @pytest.mark.parametrize(
        "kw",
        [dict(speed_range=(0.0, 0.0)), dict(speed_range=(0.0, 1.0)), dict(speed_range=(2.0, 1.0)),
         dict(sizes=(17,)), dict(shapes=()), dict(motions=("spiral",)), dict(shapes=("hexagon",)),
         dict(n_sequences=0), dict(intensities=(1.5,))]
    )
    def test_invalid_configs(self, kw):
        with pytest.raises(InvalidArgumentError):
            generate_dataset(GeneratorConfig(**{"n_sequences": 4, **kw}))

    def test_content_is_pure_translation(self, default_data):
        for seq in default_data.frames[:200, :, 0]:
            first, _ = mask_of(seq[0])
            for frame in seq[1:]:
                m, _ = mask_of(frame)
                assert m.shape == first.shape and np.array_equal(m, first)

    def test_shape_mask_matches_label(self, default_data):
        for i in range(60):
            m, _ = mask_of(default_data.frames[i, 0, 0])
            name = default_data.shape_names[default_data.content[i]]
            assert np.array_equal(m, shape_mask(name, 7))

    def test_masks_are_distinct(self):
        masks = [shape_mask(s, 7) for s in SHAPES]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(masks[i], masks[j])

    def test_line_motion_is_collinear(self, default_data):
        line = default_data.motion_names.index("line")
        checked = 0
        for i in np.flatnonzero(default_data.motion == line)[:100]:
            pts = np.array([centroid(f[0]) for f in default_data.frames[i]])
            centred = pts - pts.mean(0)
            if np.allclose(centred, 0):
                continue
            _, _, vt = np.linalg.svd(centred)
            normal = vt[-1]
            assert np.abs(centred @ normal).max() <= 1.0
            checked += 1
        assert checked > 20

    @staticmethod
    def _clean_steps(pos, limit, max_speed):
        # A step can only involve a wall contact if it starts or ends within
        # one maximal step of a wall.
        near = ((pos < max_speed) | (pos > limit - max_speed)).any(axis=1)
        return ~(near[:-1] | near[1:])

    def test_bounce_velocity_constant_between_contacts(self):
        limit, lo, hi = 20.0, 1.0, 2.0
        checked = 0
        for seed in range(200):
            pos = trajectory("bounce", 20, limit, (lo, hi), np.random.default_rng(seed))
            assert (pos >= 0).all() and (pos <= limit).all()
            steps = np.diff(pos, axis=0)
            clean = self._clean_steps(pos, limit, hi)
            for t in range(1, len(steps)):
                if clean[t] and clean[t - 1]:
                    assert np.allclose(steps[t], steps[t - 1], atol=1e-12)
                    checked += 1
            for t in np.flatnonzero(clean):
                assert lo - 1e-9 <= np.linalg.norm(steps[t]) <= hi + 1e-9
        assert checked > 500

    def test_bounce_resamples_direction(self):
        # Over many sequences, some velocity change after a contact is not a pure reflection.
        limit, hi = 9.0, 2.0
        resampled = 0
        for seed in range(100):
            pos = trajectory("bounce", 20, limit, (1.0, hi), np.random.default_rng(seed))
            steps = np.diff(pos, axis=0)
            clean = self._clean_steps(pos, limit, hi)
            idx = np.flatnonzero(clean)
            for a, b in zip(idx[:-1], idx[1:]):
                if b > a + 1 and not np.allclose(np.abs(steps[a]), np.abs(steps[b])):
                    resampled += 1
        assert resampled > 10

    def test_rendered_displacement_tracks_trajectory(self):
        mask = shape_mask("square", 5)
        for seed in range(50):
            pos = trajectory("bounce", 10, 11.0, (1.0, 2.0), np.random.default_rng(seed))
            frames = render(mask, pos, 16, 1.0)
            cents = np.array([centroid(f) for f in frames])
            assert np.abs(np.diff(cents, axis=0) - np.diff(pos, axis=0)).max() <= 1.0

    def test_zigzag_alternates_vertical_direction(self):
        # In a huge frame there are no reflections: the row step flips every
        # second frame while the column step is constant.
        pos = trajectory("zigzag", 7, 1000.0, (1.0, 1.0), np.random.default_rng(0))
        steps = np.diff(pos, axis=0)
        assert np.all(steps[:, 1] == steps[0, 1])
        assert np.array_equal(np.sign(steps[:, 0]), np.sign(steps[0, 0]) * np.array([1, -1, -1, 1, 1, -1]))

    def test_label_balance(self):
        ds = generate_dataset(GeneratorConfig(n_sequences=3000, seed=0))
        n, k = 3000, 3
        sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
        for counts in ds.label_counts().values():
            for c in counts.values():
                assert abs(c - n / k) <= 5 * sigma


class TestFileFormat:
    def test_round_trip(self, default_data, tmp_path):
        path = tmp_path / "d.bin"
        save_dataset(default_data, path)
        back = load_dataset(path)
        assert back.frames.tobytes() == default_data.frames.tobytes()
        assert np.array_equal(back.content, default_data.content)
        assert np.array_equal(back.motion, default_data.motion)
        assert back.shape_names == default_data.shape_names and back.motion_names == default_data.motion_names

    def test_layout(self, tmp_path):
        ds = generate_dataset(GeneratorConfig(n_sequences=3, image_size=8, frames=2, sizes=(3,), seed=1))
        path = tmp_path / "d.bin"
        save_dataset(ds, path)
        raw = path.read_bytes()
        end = raw.index(b"\nEND\n") + 5
        body = raw[end:]
        n_frames = ds.frames.size
        assert np.array_equal(np.frombuffer(body[: 4 * n_frames], "<f4"), ds.frames.ravel())
        assert np.array_equal(np.frombuffer(body[4 * n_frames :], "<i4"), np.concatenate([ds.content, ds.motion]))

    def test_truncated(self, default_data, tmp_path):
        path = tmp_path / "d.bin"
        save_dataset(default_data.subset(range(5)), path)
        raw = path.read_bytes()
        for cut in (10, len(raw) // 2, len(raw) - 1):
            (tmp_path / "t.bin").write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_dataset(tmp_path / "t.bin")

    def test_header_shape_mismatch(self, default_data, tmp_path):
        path = tmp_path / "d.bin"
        save_dataset(default_data.subset(range(5)), path)
        path.write_bytes(path.read_bytes().replace(b"B=5\n", b"B=6\n", 1))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_old_version(self, default_data, tmp_path):
        path = tmp_path / "d.bin"
        save_dataset(default_data.subset(range(2)), path)
        path.write_bytes(path.read_bytes().replace(b"version=1\n", b"version=0\n", 1))
        with pytest.raises(FormatError, match="version"):
            load_dataset(path)

    def test_label_out_of_range(self, tmp_path):
        ds = generate_dataset(GeneratorConfig(n_sequences=2, image_size=8, frames=2, sizes=(3,)))
        ds.content[0] = 7
        save_dataset(ds, tmp_path / "d.bin")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOPE\nversion=1\nEND\n")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "x.bin")


class TestBatching:
    def test_drop_last(self):
        sizes = [len(b) for b in batch_indices(10, 4, 0)]
        assert sizes == [4, 4]

    def test_same_seed_same_order(self):
        a = [b.tolist() for b in batch_indices(50, 8, 3)]
        b = [b.tolist() for b in batch_indices(50, 8, 3)]
        assert a == b
        assert a != [b.tolist() for b in batch_indices(50, 8, 4)]

    @pytest.mark.parametrize("n,b", [(10, 4), (64, 8), (65, 8), (7, 7), (3, 2)])
    def test_index_set_oracle(self, n, b):
        emitted = np.concatenate(batch_indices(n, b, 11)) if n >= b else np.array([], int)
        order = np.random.default_rng(11).permutation(n)
        assert sorted(emitted.tolist()) == sorted(order[: (n // b) * b].tolist())
        assert len(set(emitted.tolist())) == len(emitted)

    @pytest.mark.parametrize("b", [0, 1])
    def test_small_batch_rejected(self, b):
        with pytest.raises(InvalidArgumentError):
            batch_indices(10, b, 0)

    def test_batches_carry_labels(self, default_data):
        batch = next(batches(default_data, 16, 0))
        assert batch.frames.shape == (16, 8, 1, 16, 16) and batch.frames.dtype == torch.float32
        assert torch.equal(batch.content, torch.from_numpy(default_data.content[batch.indices].astype(np.int64)))

    def test_split_is_partition(self, default_data):
        train, test = split(default_data, 100, seed=2)
        assert len(train) == 500 and len(test) == 100
        all_bytes = {hashlib.sha1(s.tobytes()).hexdigest() for s in default_data.frames}
        parts = [hashlib.sha1(s.tobytes()).hexdigest() for s in np.concatenate([train.frames, test.frames])]
        assert set(parts) == all_bytes
