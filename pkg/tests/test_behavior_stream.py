import dataclasses
import pickle

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liber.behavior_stream import (
    Behavior,
    CacheAppended,
    PartitionConfig,
    PartitionSealed,
    UserState,
    check_partition_condition,
    ingest,
    ingest_all,
    seal_partition,
)
from liber.errors import DegenerateInputError, IdentityError, PreconditionError

from conftest import make_behaviors

K20 = PartitionConfig(20)


class TestCondition:
    @pytest.mark.parametrize("n,expected", [(20, True), (0, False), (19, False), (21, True)])
    def test_length_rule(self, n, expected):
        assert check_partition_condition(make_behaviors(n), K20) is expected

    def test_k_must_be_positive(self):
        with pytest.raises(Exception):
            PartitionConfig(0)


class TestIngest:
    def test_twenty_behaviors_seal_one_partition(self):
        state = UserState("u1")
        outcomes = [ingest(state, b, K20) for b in make_behaviors(20)]
        assert all(isinstance(o, CacheAppended) for o in outcomes[:-1])
        assert isinstance(outcomes[-1], PartitionSealed)
        assert outcomes[-1].partition.index == 1
        assert len(outcomes[-1].partition.behaviors) == 20
        assert state.short_term_cache == []
        assert state.partition_count == 1

    def test_single_behavior_stays_in_cache(self):
        state = UserState("u1")
        out = ingest(state, make_behaviors(1)[0], K20)
        assert out == CacheAppended(1)
        assert state.partition_count == 0

    def test_forty_five(self):
        state = UserState("u1")
        sealed = ingest_all(state, make_behaviors(45), K20)
        assert [p.index for p in sealed] == [1, 2]
        assert len(state.short_term_cache) == 5

    def test_sealed_at_is_last_timestamp(self):
        state = UserState("u1")
        (p,) = ingest_all(state, make_behaviors(20, start=100), K20)
        assert p.sealed_at == 119

    def test_user_mismatch(self):
        state = UserState("u1")
        with pytest.raises(IdentityError):
            ingest(state, make_behaviors(1, user="u2")[0], K20)

    def test_out_of_order_rejected(self):
        state = UserState("u1")
        ingest(state, make_behaviors(1, start=10)[0], K20)
        with pytest.raises(PreconditionError):
            ingest(state, make_behaviors(1, start=3)[0], K20)

    def test_equal_timestamps_keep_arrival_order(self):
        state = UserState("u1")
        a = Behavior("u1", "a", "A", timestamp=5)
        b = Behavior("u1", "b", "B", timestamp=5)
        ingest_all(state, [a, b], K20)
        assert [x.item_id for x in state.short_term_cache] == ["a", "b"]

    def test_missing_rating_accepted(self):
        state = UserState("u1")
        ingest(state, Behavior("u1", "x", "X", rating=None, timestamp=0), K20)
        assert len(state.short_term_cache) == 1


class TestSeal:
    def test_index_follows_count(self):
        state = UserState("u1")
        ingest_all(state, make_behaviors(40), K20)
        state.short_term_cache.extend(make_behaviors(20, start=40))
        p = seal_partition(state)
        assert p.index == 3 and len(p) == 20 and state.short_term_cache == []

    def test_flush_single(self):
        state = UserState("u1")
        sealed = ingest_all(state, make_behaviors(1), K20, flush=True)
        assert len(sealed) == 1 and len(sealed[0]) == 1

    def test_empty_cache(self):
        with pytest.raises(DegenerateInputError):
            seal_partition(UserState("u1"))

    def test_partition_is_immutable(self):
        state = UserState("u1")
        (p,) = ingest_all(state, make_behaviors(20), K20)
        with pytest.raises(dataclasses.FrozenInstanceError):
            p.index = 7
        with pytest.raises(AttributeError):
            p.behaviors.append(make_behaviors(1)[0])
        with pytest.raises(dataclasses.FrozenInstanceError):
            p.behaviors[0].title = "changed"


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(0, 1000), k=st.integers(1, 60))
    def test_counts_and_lossless(self, n, k):
        stream = make_behaviors(n)
        state = UserState("u1")
        ingest_all(state, stream, PartitionConfig(k))
        assert state.partition_count == n // k
        assert len(state.short_term_cache) == n % k
        assert state.behaviors() == stream
        assert [p.index for p in state.partitions] == list(range(1, n // k + 1))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(0, 120), k=st.integers(1, 30))
    def test_deterministic(self, n, k):
        a, b = UserState("u1"), UserState("u1")
        ingest_all(a, make_behaviors(n), PartitionConfig(k))
        ingest_all(b, make_behaviors(n), PartitionConfig(k))
        assert pickle.dumps(a) == pickle.dumps(b)
