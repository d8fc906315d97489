import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fludesim.cache import (
    CacheEntry,
    ModelCache,
    ProtocolError,
    caching_interval,
    default_tick,
    resume_or_fresh,
)
from fludesim.trainer import ModelSpec, TrainerConfig, generate_synthetic_task, pass_order, train_local


def _entry(params, processed=3, total=10, cached_round=1, pass_round=1):
    return CacheEntry(np.asarray(params, dtype=np.float32), processed, total, 0.04, cached_round, 12.5, pass_round)


def test_rolling_cache_keeps_only_the_latest():
    cache = ModelCache()
    cache.checkpoint(4, _entry([1.0, 2.0], processed=2))
    cache.checkpoint(4, _entry([3.0, 4.0], processed=5))
    assert len(cache) == 1
    assert cache.get(4).processed_samples == 5
    np.testing.assert_array_equal(cache.get(4).params, np.float32([3.0, 4.0]))


def test_round_trip_is_bit_exact():
    values = np.random.default_rng(0).standard_normal(33).astype(np.float32)
    cache = ModelCache()
    cache.checkpoint(0, _entry(values))
    assert cache.get(0).params.tobytes() == values.tobytes()


def test_checkpoint_copies_the_array():
    values = np.zeros(3, dtype=np.float32)
    cache = ModelCache()
    cache.checkpoint(0, _entry(values))
    values[0] = 9.0
    assert cache.get(0).params[0] == 0.0


def test_entry_bounds():
    with pytest.raises(ValueError):
        _entry([0.0], processed=11, total=10)


def test_fresh_start_resets_and_clears():
    cache = ModelCache()
    cache.checkpoint(2, _entry([1.0]))
    start = resume_or_fresh(cache, 2, 5, True, np.float32([7.0]))
    assert start.fresh and start.offset == 0 and start.pass_round == 5
    assert not cache.has(2)


def test_resume_continues_from_the_cached_offset():
    cache = ModelCache()
    cache.checkpoint(2, _entry([1.0], processed=7, total=10, pass_round=3))
    start = resume_or_fresh(cache, 2, 5, False)
    assert not start.fresh
    assert start.offset == 7
    assert start.pass_round == 3
    assert cache.has(2)


def test_missing_cache_and_no_global_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        resume_or_fresh(ModelCache(), 1, 3, False)
    with pytest.raises(ProtocolError):
        resume_or_fresh(ModelCache(), 1, 3, True, None)


def test_staleness_counts_rounds_since_caching():
    cache = ModelCache()
    cache.checkpoint(0, _entry([0.0], cached_round=4))
    for d in range(6):
        assert cache.staleness(0, 4 + d) == d
    assert cache.status([0, 1], 9) == {0: 5, 1: None}
    with pytest.raises(ValueError):
        cache.staleness(0, 3)


def test_caching_interval_anchors():
    assert caching_interval(1.0, 1.0, 60) == pytest.approx(300.0)
    assert caching_interval(0.0, 0.3, 60) == pytest.approx(30.0)
    assert caching_interval(0.0, 1.0, 60) == pytest.approx(30.0)
    mid = caching_interval(0.5, 0.5, 60)
    assert 30.0 < mid < 300.0
    with pytest.raises(ValueError):
        caching_interval(0.5, 0.5, 0)


@given(
    b=st.floats(min_value=0, max_value=1),
    n=st.floats(min_value=0, max_value=1),
    db=st.floats(min_value=0, max_value=1),
    dn=st.floats(min_value=0, max_value=1),
)
def test_caching_interval_is_monotone(b, n, db, dn):
    base = caching_interval(b, n, 60.0)
    assert caching_interval(min(1.0, b + db), n, 60.0) >= base
    assert caching_interval(b, min(1.0, n + dn), 60.0) >= base
    assert 30.0 - 1e-9 <= base <= 300.0 + 1e-9


def test_default_tick():
    assert default_tick(200) == 20
    assert default_tick(64) == 7
    assert default_tick(3) == 1


@pytest.mark.parametrize("n_samples", [100, 200, 320])
def test_interrupt_at_seventy_percent_then_finish_the_last_thirty(n_samples):
    task = generate_synthetic_task(4, 6, 1, n_samples, 4, seed=n_samples)
    spec = ModelSpec(6, 4)
    cfg = TrainerConfig()
    shard = task.shards[0]
    order = pass_order(9, 0, 1, len(shard), n_samples)
    cache = ModelCache()

    def hook(position, params):
        cache.checkpoint(0, CacheEntry(params, position, n_samples, cfg.learning_rate, 1, 0.0, 1))

    start = spec.init(0).values
    straight = train_local(spec, start, shard, cfg, order)
    cut = train_local(spec, start, shard, cfg, order, interruption_fraction=0.7, checkpoint_hook=hook)
    assert not cut.completed
    assert cache.get(0).processed_samples == int(0.7 * n_samples)

    resumed_from = resume_or_fresh(cache, 0, 2, False)
    rest = train_local(spec, resumed_from.params, shard, cfg, order, resume_offset=resumed_from.offset)
    assert rest.samples_processed == n_samples - int(0.7 * n_samples)
    assert rest.samples_processed == round(0.3 * n_samples)
    assert rest.params.tobytes() == straight.params.tobytes()
