import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpnet.numerics import UsageError
from mpnet.scenes import (
    PLANE_CLASSES,
    BlockSpec,
    GeneratorConfig,
    MagicError,
    Scene,
    TruncatedError,
    VersionError,
    block_offsets,
    blockify,
    decode_scene,
    encode_scene,
    generate_scene,
    read_scene,
    write_ply,
    write_scene,
)


def scene(seed=0, **kw):
    return generate_scene(GeneratorConfig(seed=seed, **kw))


def test_same_seed_is_bit_identical():
    a, b = scene(5), scene(5)
    assert encode_scene(a) == encode_scene(b)


@pytest.mark.parametrize("seed", range(6))
def test_construction_invariants(seed):
    s = scene(seed)
    assert s.num_points == 20000
    # instance ids dense, one class per instance
    assert set(s.instance) == set(range(s.instance.max() + 1))
    for k in np.unique(s.instance):
        assert len(np.unique(s.semantic[s.instance == k])) == 1
    assert (s.xyz >= 0).all() and (s.xyz <= s.extent + 1e-6).all()
    assert (s.points[:, 3:] >= 0).all() and (s.points[:, 3:] <= 1).all()
    # floor, ceiling and four walls always present
    assert (np.bincount(s.semantic[np.unique(s.instance, return_index=True)[1]], minlength=6)[:3] == [1, 1, 4]).all()


def test_planes_dominate_over_twenty_seeds():
    fractions = [np.isin(scene(s).semantic, PLANE_CLASSES).mean() for s in range(20)]
    assert min(fractions) >= 0.70


def test_rare_pattern_is_tagged():
    s = scene(3, force_rare=True)
    assert s.rare and s.metadata["pattern"] in ("stacked_chairs", "back_to_back_chairs")
    assert not scene(3, rare_pattern_rate=0.0).rare


def test_generator_config_checks():
    with pytest.raises(ValueError):
        GeneratorConfig(rare_pattern_rate=1.5)
    with pytest.raises(ValueError):
        GeneratorConfig(density_weights=(1, 1, 1, 1, 1, 0))


class TestBlocks:
    def test_offsets(self):
        assert block_offsets(1.0, BlockSpec()).tolist() == [0.0, 0.5]
        assert block_offsets(1.2, BlockSpec()).tolist() == [0.0, 0.5, 1.0]
        assert block_offsets(0.3, BlockSpec()).tolist() == [0.0]

    def test_unit_room_windows(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(0, 1, (800, 3)), rng.uniform(0, 1, (800, 3))])
        s = Scene(pts, np.zeros(800), np.zeros(800))
        blocks = blockify(s, BlockSpec(samples_per_block=128))
        assert sorted(b.origin for b in blocks) == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)]

    def test_exact_count_is_permutation(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(0, 0.45, (300, 3)), rng.uniform(0, 1, (300, 3))])
        s = Scene(pts, np.zeros(300), np.zeros(300))
        (blk,) = blockify(s, BlockSpec(samples_per_block=300), seed=4)
        assert sorted(blk.indices.tolist()) == list(range(300))

    def test_padding_keeps_every_point(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(0, 0.45, (150, 3)), rng.uniform(0, 1, (150, 3))])
        s = Scene(pts, np.zeros(150), np.zeros(150))
        (blk,) = blockify(s, BlockSpec(samples_per_block=400), seed=4)
        assert blk.count == 400 and set(blk.indices.tolist()) == set(range(150))

    def test_sparse_windows_skipped(self):
        pts = np.zeros((50, 6))
        assert blockify(Scene(pts, np.zeros(50), np.zeros(50))) == []

    @pytest.mark.parametrize("seed", range(4))
    def test_full_blocks_cover_every_point(self, seed):
        s = scene(seed)
        covered = np.zeros(s.num_points, dtype=bool)
        for b in blockify(s, BlockSpec(), full=True):
            covered[b.indices] = True
        assert covered.all()

    def test_features_are_block_local(self):
        s = scene(1)
        for b in blockify(s, BlockSpec(samples_per_block=256), seed=1):
            local = b.features[:, :3]
            assert local.min() >= 0 and (local[:, :2].max(axis=0) <= 1.0 + 1e-6).all()
            np.testing.assert_allclose(b.features[:, 3:6], s.points[b.indices, 3:6])

    def test_deterministic_given_seed(self):
        s = scene(2)
        a = blockify(s, BlockSpec(samples_per_block=256), seed=9)
        b = blockify(s, BlockSpec(samples_per_block=256), seed=9)
        assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    def test_adjacent_windows_overlap_by_half(self):
        origins = sorted({b.origin for b in blockify(scene(0), BlockSpec(), full=True)})
        xs = sorted({o[0] for o in origins})
        assert np.allclose(np.diff(xs), 0.5)

    def test_empty_scene(self):
        with pytest.raises(UsageError):
            blockify(Scene(np.zeros((0, 6)), [], []))


class TestFormat:
    @given(st.integers(1, 50), st.integers(0, 2**31 - 1))
    def test_round_trip_bit_exact(self, n, seed):
        rng = np.random.default_rng(seed)
        s = Scene(rng.normal(size=(n, 6)).astype(np.float32), rng.integers(0, 6, n), rng.integers(0, 2**32, n))
        back = decode_scene(encode_scene(s))
        assert back.points.tobytes() == s.points.tobytes()
        assert np.array_equal(back.semantic, s.semantic) and np.array_equal(back.instance, s.instance)
        assert encode_scene(back) == encode_scene(s)

    def test_file_round_trip(self, tmp_path):
        s = scene(0)
        write_scene(s, tmp_path / "s.mpnc")
        assert encode_scene(read_scene(tmp_path / "s.mpnc")) == encode_scene(s)

    def test_layout(self):
        s = Scene(np.arange(6, dtype=np.float32).reshape(1, 6), [3], [70000])
        buf = encode_scene(s)
        assert buf[:20] == struct.pack("<4sIQI", b"MPNC", 1, 1, 6)
        assert len(buf) == 20 + 24 + 2 + 4
        assert buf[-6:] == struct.pack("<HI", 3, 70000)

    def test_bad_magic(self):
        with pytest.raises(MagicError):
            decode_scene(b"XXXX" + encode_scene(scene(0))[4:])

    def test_version(self):
        buf = bytearray(encode_scene(scene(0)))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError):
            decode_scene(bytes(buf))

    def test_truncated(self):
        buf = encode_scene(scene(0))
        with pytest.raises(TruncatedError):
            decode_scene(buf[:-1])
        with pytest.raises(TruncatedError):
            decode_scene(buf[:10])

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            write_scene(Scene(np.zeros((0, 6)), [], []), tmp_path / "e.mpnc")


def test_ply_export(tmp_path):
    s = scene(0)
    write_ply(s, tmp_path / "s.ply")
    lines = (tmp_path / "s.ply").read_text().splitlines()
    assert f"element vertex {s.num_points}" in lines
    assert len(lines) - lines.index("end_header") - 1 == s.num_points
