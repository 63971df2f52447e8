import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from streamkv import CachePolicyConfig, LayerCache, apply_rope, build_frequencies

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def fill_cache(rng, frames, f=4, heads=2, dim=12, freqs=None):
    """Cache with ``frames`` frames of post-RoPE random keys."""
    freqs = freqs or build_frequencies(dim)
    cache = LayerCache(f, heads, dim)
    pos = np.array([(fr, i // 2, i % 2) for fr in range(frames) for i in range(f)])
    raw = rng.standard_normal((heads, frames * f, dim))
    cache.append_chunk(apply_rope(raw, pos, freqs), rng.standard_normal((heads, frames * f, dim)),
                       pos)
    return cache, freqs


def assert_timeline(cache):
    """Effective frames non-decreasing with steps of at most one, per head."""
    for head in range(cache.num_heads):
        ef = cache.effective_frames[head]
        steps = np.diff(ef)
        assert (steps >= 0).all() and (steps <= 1).all(), ef


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return CachePolicyConfig(sink_frames=2, budget_frames=5, recent_frames=1,
                             max_window_frames=7, tokens_per_frame=4, chunk_frames=2)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
