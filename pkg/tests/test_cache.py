import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamkv.cache import (CachePolicyConfig, KVCache, LayerCache, Policy, append_chunk,
                            evict_fifo, partition)
from streamkv.errors import CacheError, ConfigError
from streamkv.rope import TokenPosition

from conftest import fill_cache
from oracles import FULL_SCALE_F, SINK_BOUNDARY


def positions(first, frames, f):
    return np.array([(fr, 0, i) for fr in range(first, first + frames) for i in range(f)])


def chunk(rng, first, frames, f=4, heads=1, dim=6):
    t = frames * f
    return (rng.standard_normal((heads, t, dim)), rng.standard_normal((heads, t, dim)),
            positions(first, frames, f))


class TestConfig:
    def test_defaults_validate(self):
        cfg = CachePolicyConfig()
        assert (cfg.sink_frames, cfg.budget_frames, cfg.recent_frames, cfg.max_window_frames) \
            == (10, 16, 4, 21)
        assert cfg.policy is Policy.DEEP_FORCING
        assert cfg.topc_capacity == 2 * 64

    @pytest.mark.parametrize("kw", [
        dict(sink_frames=10, budget_frames=12, recent_frames=4),
        dict(sink_frames=-1),
        dict(recent_frames=-1),
        dict(budget_frames=22),
        dict(tokens_per_frame=0),
        dict(chunk_frames=0),
        dict(sink_frames=2.5),
        dict(recent_frames=True),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            CachePolicyConfig(**kw)

    def test_unknown_enum_lists_valid_values(self):
        with pytest.raises(ConfigError, match="deep_forcing"):
            CachePolicyConfig(policy="lru")

    def test_dict_roundtrip_and_unknown_keys(self):
        cfg = CachePolicyConfig(policy="fifo", score_mode="softmax")
        assert CachePolicyConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        with pytest.raises(ConfigError):
            CachePolicyConfig.from_dict({"sink": 3})

    def test_degenerate_pure_topc(self):
        assert CachePolicyConfig(sink_frames=0, recent_frames=0).topc_capacity == 16 * 64


class TestAppend:
    def test_first_chunk(self, rng):
        c = LayerCache(4, 1, 6)
        append_chunk(c, *chunk(rng, 0, 3))
        assert len(c) == 12 and c.frame_count == 3
        assert c.frames().tolist() == [0, 1, 2]
        assert c.frame_starts() == {0: 0, 1: 4, 2: 8}
        assert c.effective_frames.tolist() == [c.positions[0, :, 0].tolist()]

    def test_second_chunk_contiguous(self, rng):
        c = LayerCache(4, 1, 6)
        c.append_chunk(*chunk(rng, 0, 3))
        c.append_chunk(*chunk(rng, 3, 3))
        assert c.frames().tolist() == list(range(6))
        assert c.token_ids[0].tolist() == list(range(24))

    def test_gap_rejected(self, rng):
        c = LayerCache(4, 1, 6)
        c.append_chunk(*chunk(rng, 0, 3))
        with pytest.raises(CacheError):
            c.append_chunk(*chunk(rng, 7, 3))

    def test_partial_frame_rejected(self, rng):
        c = LayerCache(4, 1, 6)
        k, v, p = chunk(rng, 0, 3)
        with pytest.raises(CacheError):
            c.append_chunk(k[:, :10], v[:, :10], p[:10])

    def test_interleaved_frames_rejected(self, rng):
        c = LayerCache(4, 1, 6)
        k, v, p = chunk(rng, 0, 2)
        with pytest.raises(CacheError):
            c.append_chunk(k, v, p[::-1])

    def test_shape_errors(self, rng):
        c = LayerCache(4, 2, 6)
        k, v, p = chunk(rng, 0, 1, heads=2)
        with pytest.raises(CacheError):
            c.append_chunk(k[:1], v[:1], p)
        with pytest.raises(CacheError):
            c.append_chunk(k, v[:, :, :5], p)

    def test_token_position_list_accepted(self, rng):
        c = LayerCache(2, 1, 4)
        pos = [TokenPosition(0, 0, 0), TokenPosition(0, 0, 1)]
        c.append_chunk(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), pos)
        assert c.records()[1].original_pos == TokenPosition(0, 0, 1)

    def test_values_stored_bit_identical(self, rng):
        c = LayerCache(4, 1, 6)
        k, v, p = chunk(rng, 0, 3)
        c.append_chunk(k, v, p)
        assert c.values.tobytes() == v.tobytes()

    def test_many_appends_grow_buffer(self, rng):
        c = LayerCache(4, 1, 6)
        vs = []
        for i in range(40):
            k, v, p = chunk(rng, i, 1)
            c.append_chunk(k, v, p)
            vs.append(v)
        assert c.values.tobytes() == np.concatenate(vs, axis=1).tobytes()


class TestPartition:
    def test_full_scale_frame_layout(self, rng):
        c = LayerCache(1, 1, 6)
        c.append_chunk(*chunk(rng, 0, 21, f=1))
        part = partition(c, CachePolicyConfig(tokens_per_frame=1))
        assert (part.sink, part.candidate, part.recent) == ((0, 10), (10, 17), (17, 21))

    def test_empty_candidates(self, rng):
        c = LayerCache(1, 1, 6)
        c.append_chunk(*chunk(rng, 0, 14, f=1))
        part = c.partition(CachePolicyConfig(tokens_per_frame=1))
        assert part.candidate == (10, 10)

    def test_too_short(self, rng):
        c = LayerCache(1, 1, 6)
        c.append_chunk(*chunk(rng, 0, 13, f=1))
        with pytest.raises(CacheError):
            c.partition(CachePolicyConfig(tokens_per_frame=1))

    def test_full_scale_sink_interval(self):
        c = LayerCache(FULL_SCALE_F, 1, 2)
        t = 14 * FULL_SCALE_F
        c.append_chunk(np.zeros((1, t, 2)), np.zeros((1, t, 2)), positions(0, 14, FULL_SCALE_F))
        part = c.partition(CachePolicyConfig(tokens_per_frame=FULL_SCALE_F))
        assert part.sink == (0, SINK_BOUNDARY)

    @given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 10), st.integers(1, 4))
    def test_ranges_cover_cache(self, s, r, extra, f):
        frames = s + r + extra
        if frames == 0:
            return
        c = LayerCache(f, 1, 2)
        t = frames * f
        c.append_chunk(np.zeros((1, t, 2)), np.zeros((1, t, 2)), positions(0, frames, f))
        cfg = CachePolicyConfig(sink_frames=s, recent_frames=r, budget_frames=s + r,
                                max_window_frames=max(s + r, 1), tokens_per_frame=f)
        part = c.partition(cfg)
        assert part.sink[0] == 0 and part.recent[1] == len(c)
        assert part.sink[1] == part.candidate[0] and part.candidate[1] == part.recent[0]
        assert part.sink[1] == s * f and part.recent[1] - part.recent[0] == r * f


class TestEvict:
    def test_evict_one(self, rng):
        c = LayerCache(4, 1, 6)
        c.append_chunk(*chunk(rng, 0, 21))
        evict_fifo(c, 1)
        assert c.frame_count == 20 and c.frames()[0] == 1
        assert c.frame_starts()[1] == 0

    def test_evict_zero(self, rng):
        c = LayerCache(4, 1, 6)
        c.append_chunk(*chunk(rng, 0, 21))
        before = c.copy()
        c.evict_fifo(0)
        assert c.keys.tobytes() == before.keys.tobytes()

    def test_drain(self, rng):
        c = LayerCache(4, 1, 6)
        c.append_chunk(*chunk(rng, 0, 21))
        c.evict_fifo(21)
        assert len(c) == 0 and c.frame_count == 0
        c.append_chunk(*chunk(rng, 21, 3))
        assert c.frames().tolist() == [21, 22, 23]

    def test_over_eviction(self, rng):
        c = LayerCache(4, 1, 6)
        c.append_chunk(*chunk(rng, 0, 3))
        with pytest.raises(CacheError):
            c.evict_fifo(4)
        with pytest.raises(CacheError):
            c.evict_fifo(-1)

    @given(st.lists(st.tuples(st.booleans(), st.integers(1, 4)), min_size=1, max_size=25))
    def test_count_is_frames_times_f(self, ops):
        rng = np.random.default_rng(0)
        c = LayerCache(3, 1, 4)
        nxt = 0
        for is_append, n in ops:
            if is_append or c.frame_count < n:
                c.append_chunk(*chunk(rng, nxt, n, f=3, dim=4))
                nxt += n
            else:
                c.evict_fifo(n)
            assert len(c) == c.frame_count * 3
            assert (np.diff(c.token_ids[0]) > 0).all()


class TestKeep:
    def test_requires_increasing(self, rng):
        c, _ = fill_cache(rng, 3)
        with pytest.raises(CacheError):
            c.keep([2, 1])
        with pytest.raises(CacheError):
            c.keep([0, 99])
        with pytest.raises(CacheError):
            c.keep(np.zeros((3, 1), dtype=int))

    def test_per_head_subsets(self, rng):
        c, _ = fill_cache(rng, 3)
        vals = c.values.copy()
        c.keep(np.array([[0, 5, 6], [1, 2, 11]]))
        assert c.token_ids.tolist() == [[0, 5, 6], [1, 2, 11]]
        assert c.values[1, 2].tobytes() == vals[1, 11].tobytes()


def test_json_roundtrip(rng):
    c, _ = fill_cache(rng, 3)
    c.keep(np.array([[0, 5, 6], [1, 2, 11]]))
    data = json.loads(json.dumps(c.to_dict()))
    back = LayerCache.from_dict(data)
    assert back.keys.tobytes() == c.keys.tobytes()
    assert back.values.tobytes() == c.values.tobytes()
    assert back.token_ids.tolist() == c.token_ids.tolist()
    assert back.effective_frames.tolist() == c.effective_frames.tolist()
    assert back.next_frame == c.next_frame == 3


def test_copy_is_independent(rng):
    c, _ = fill_cache(rng, 3)
    d = c.copy()
    d.keys[:] = 0
    d.evict_fifo(1)
    assert c.frame_count == 3 and np.abs(c.keys).sum() > 0


def test_records(rng):
    c, _ = fill_cache(rng, 2, f=2, heads=1, dim=4)
    recs = c.records()
    assert [r.token_id for r in recs] == [0, 1, 2, 3]
    assert recs[2].original_pos == TokenPosition(1, 0, 0)
    assert recs[3].effective_frame == 1


def test_kv_cache_container(rng):
    kv = KVCache(3, 2, 2, 4)
    t = 4
    pos = positions(0, 2, 2)
    kv.append_chunk(rng.standard_normal((3, 2, t, 4)), rng.standard_normal((3, 2, t, 4)), pos)
    assert len(kv) == 4 and kv.frame_count == 2 and len(list(kv)) == 3
    assert len(kv.to_dict()["layers"]) == 3
    with pytest.raises(CacheError):
        LayerCache(0, 1, 1)
