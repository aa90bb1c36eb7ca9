"""Tests for the dataset model, CSV ingestion, splitting, and the synthetic generator."""

from __future__ import annotations

import numpy as np
import pytest

from nextbasket.data import (
    AttributeRecord,
    AttributeSchema,
    Basket,
    ChronoSplit,
    Dataset,
    MinMaxScaler,
    UserSequence,
    baskets_in,
    chronological_split,
    context_before,
    fit_transform_numerical,
    load_csv,
    load_dataset,
    multi_hot,
    records_in,
    save_dataset,
)
from nextbasket.errors import ContractError, ParseError, TableLookupError, VocabularyError
from nextbasket.synth import SynthConfig, synth_generate


class TestSchema:
    def test_global_value_ids_use_declaration_order_offsets(self):
        schema = AttributeSchema(categorical={"color": ("red", "blue"), "size": ("s", "m", "l")})
        assert schema.value_id("color", "red") == 0
        assert schema.value_id("color", "blue") == 1
        assert schema.value_id("size", "s") == 2
        assert schema.value_id("size", "l") == 4
        assert schema.n_cat_values == 5
        assert schema.n_attributes == 2

    def test_unknown_attribute_and_value_raise(self):
        schema = AttributeSchema(categorical={"color": ("red",)})
        with pytest.raises(VocabularyError):
            schema.value_id("shape", "round")
        with pytest.raises(VocabularyError):
            schema.value_id("color", "green")

    def test_duplicate_names_rejected(self):
        with pytest.raises(ContractError):
            AttributeSchema(categorical={"x": ("a",)}, numerical=("x",))
        with pytest.raises(ContractError):
            AttributeSchema(categorical={"x": ()})


class TestBasketAndSequence:
    def test_items_stored_in_ascending_order(self):
        assert Basket(3, (5, 2, 9)).item_ids == (2, 5, 9)

    def test_invalid_baskets_rejected(self):
        with pytest.raises(ContractError):
            Basket(0, ())
        with pytest.raises(ContractError):
            Basket(0, (1, 1))
        with pytest.raises(ContractError):
            Basket(-1, (0,))

    def test_time_order_enforced(self):
        with pytest.raises(ContractError):
            UserSequence("u", [Basket(2, (1,)), Basket(2, (2,))])
        with pytest.raises(ContractError):
            UserSequence("u", [], [AttributeRecord(3), AttributeRecord(1)])


class TestLoadCsv:
    def _write(self, tmp_path, name, text):
        path = tmp_path / name
        path.write_text(text)
        return path

    def test_rows_with_same_user_and_day_group_into_one_basket(self, tmp_path):
        path = self._write(
            tmp_path,
            "i.csv",
            "user_id,time_stamp,item_id\n"
            "a,2021-01-01,1\na,2021-01-01,2\na,2021-01-01,3\n",
        )
        users = load_csv(path, AttributeSchema(), "day", 5)
        assert len(users) == 1
        assert users[0].baskets == [Basket(0, (1, 2, 3))]

    def test_calendar_gaps_preserved(self, tmp_path):
        path = self._write(
            tmp_path,
            "i.csv",
            "user_id,time_stamp,item_id\na,2021-01-01,0\na,2021-01-03,1\n",
        )
        users = load_csv(path, AttributeSchema(), "day", 5)
        assert [b.time_index for b in users[0].baskets] == [0, 2]

    def test_month_granularity(self, tmp_path):
        path = self._write(
            tmp_path,
            "i.csv",
            "user_id,time_stamp,item_id\na,2020-11-15,0\na,2021-02-01,1\n",
        )
        users = load_csv(path, AttributeSchema(), "month", 5)
        assert [b.time_index for b in users[0].baskets] == [0, 3]

    def test_item_outside_catalog_raises_vocabulary_error(self, tmp_path):
        path = self._write(tmp_path, "i.csv", "user_id,time_stamp,item_id\na,2021-01-01,7\n")
        with pytest.raises(VocabularyError, match="7"):
            load_csv(path, AttributeSchema(), "day", 5)

    def test_malformed_rows_name_the_line(self, tmp_path):
        bad_date = self._write(
            tmp_path, "d.csv", "user_id,time_stamp,item_id\na,2021-01-01,1\na,not-a-date,2\n"
        )
        with pytest.raises(ParseError, match="line 3"):
            load_csv(bad_date, AttributeSchema(), "day", 5)
        bad_item = self._write(tmp_path, "it.csv", "user_id,time_stamp,item_id\na,2021-01-01,x\n")
        with pytest.raises(ParseError, match="line 2"):
            load_csv(bad_item, AttributeSchema(), "day", 5)
        bad_header = self._write(tmp_path, "h.csv", "user,when,what\na,2021-01-01,1\n")
        with pytest.raises(ParseError, match="line 1"):
            load_csv(bad_header, AttributeSchema(), "day", 5)

    def test_attribute_rows_parsed_with_global_value_ids(self, tmp_path):
        inter = self._write(tmp_path, "i.csv", "user_id,time_stamp,item_id\na,2021-01-01,0\n")
        attrs = self._write(
            tmp_path,
            "a.csv",
            "user_id,time_stamp,color,size,income\n"
            "a,2021-01-01,red,m,100\na,2021-01-02,blue,s,250.5\n",
        )
        schema = AttributeSchema(categorical={"color": ("red", "blue"), "size": ("s", "m")}, numerical=("income",))
        users = load_csv(inter, schema, "day", 5, attributes_path=attrs)
        recs = users[0].attribute_records
        assert recs[0] == AttributeRecord(0, (0, 3), (100.0,))
        assert recs[1] == AttributeRecord(1, (1, 2), (250.5,))

    def test_unknown_attribute_value_raises(self, tmp_path):
        inter = self._write(tmp_path, "i.csv", "user_id,time_stamp,item_id\na,2021-01-01,0\n")
        attrs = self._write(tmp_path, "a.csv", "user_id,time_stamp,color\na,2021-01-01,green\n")
        schema = AttributeSchema(categorical={"color": ("red", "blue")})
        with pytest.raises(VocabularyError, match="green"):
            load_csv(inter, schema, "day", 5, attributes_path=attrs)

    def test_users_ordered_by_id(self, tmp_path):
        path = self._write(
            tmp_path,
            "i.csv",
            "user_id,time_stamp,item_id\nzed,2021-01-01,0\nann,2021-01-02,1\n",
        )
        users = load_csv(path, AttributeSchema(), "day", 5)
        assert [u.user_id for u in users] == ["ann", "zed"]


class TestSplit:
    def test_ranges_must_be_ordered_and_disjoint(self):
        with pytest.raises(ContractError):
            ChronoSplit((0, 6), (5, 8), (8, 10))
        with pytest.raises(ContractError):
            ChronoSplit((0, 5), (5, 5), (5, 10))
        ChronoSplit((0, 5), (5, 8), (8, 10))

    def test_boundaries_checked_against_data_span(self):
        user = UserSequence("u", [Basket(0, (0,)), Basket(4, (1,))])
        data = Dataset([user], AttributeSchema(), 5)
        with pytest.raises(ContractError):
            chronological_split(data, ChronoSplit((0, 5), (5, 8), (8, 10)))

    def test_views_partition_without_leakage(self):
        split = ChronoSplit((0, 5), (5, 8), (8, 10))
        user = UserSequence("u", [Basket(t, (0,)) for t in (0, 3, 5, 7, 9)])
        parts = [baskets_in(user, split.range(p)) for p in ("train", "validation", "test")]
        assert [len(p) for p in parts] == [2, 2, 1]
        times = [b.time_index for part in parts for b in part]
        assert sorted(times) == [0, 3, 5, 7, 9]
        assert all(b.time_index < 5 for b in parts[0])

    def test_user_without_test_baskets_yields_empty_view(self):
        split = ChronoSplit((0, 5), (5, 8), (8, 10))
        user = UserSequence("u", [Basket(1, (0,))])
        assert baskets_in(user, split.test) == []

    def test_context_before_cuts_strictly(self):
        user = UserSequence(
            "u", [Basket(t, (0,)) for t in (1, 4, 6)], [AttributeRecord(t) for t in (2, 6)]
        )
        ctx = context_before(user, 6)
        assert [b.time_index for b in ctx.baskets] == [1, 4]
        assert [r.time_index for r in ctx.attribute_records] == [2]


class TestNormalization:
    def _dataset(self, values):
        recs = [AttributeRecord(t, (), (float(v),)) for t, v in enumerate(values)]
        user = UserSequence("u", [Basket(0, (0,))], recs)
        return Dataset([user], AttributeSchema(numerical=("x",)), 2)

    def test_endpoints_map_to_unit_interval(self):
        data = self._dataset([0, 5, 10])
        split = ChronoSplit((0, 3), (3, 4), (4, 5))
        out, _ = fit_transform_numerical(data, split)
        got = [r.num_values[0] for r in out.users[0].attribute_records]
        np.testing.assert_allclose(got, [-1.0, 0.0, 1.0])

    def test_out_of_range_values_clamp(self):
        data = self._dataset([0, 10, 12])
        split = ChronoSplit((0, 2), (2, 3), (3, 4))
        out, scaler = fit_transform_numerical(data, split)
        assert out.users[0].attribute_records[2].num_values[0] == 1.0
        assert scaler.transform((-3.0,)) == (-1.0,)

    def test_constant_attribute_maps_to_zero_with_warning(self):
        data = self._dataset([7, 7, 7])
        split = ChronoSplit((0, 2), (2, 3), (3, 4))
        with pytest.warns(UserWarning, match="constant"):
            out, _ = fit_transform_numerical(data, split)
        assert all(r.num_values[0] == 0.0 for r in out.users[0].attribute_records)

    def test_transform_is_monotone_and_bounded(self):
        scaler = MinMaxScaler(np.array([2.0]), np.array([8.0]))
        xs = np.linspace(-5, 15, 41)
        ys = [scaler.transform((x,))[0] for x in xs]
        assert all(b >= a for a, b in zip(ys, ys[1:]))
        assert min(ys) == -1.0 and max(ys) == 1.0


class TestMultiHot:
    def test_example_vector(self):
        np.testing.assert_array_equal(multi_hot({0, 2}, 4), [1, 0, 1, 0])

    def test_empty_gives_zeros(self):
        assert multi_hot((), 3).sum() == 0

    def test_sum_equals_basket_size(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ids = rng.choice(50, size=rng.integers(1, 10), replace=False)
            assert multi_hot(ids, 50).sum() == len(ids)

    def test_out_of_range_raises(self):
        with pytest.raises(TableLookupError):
            multi_hot((4,), 4)


class TestRoundTrip:
    def _sample(self):
        schema = AttributeSchema(categorical={"seg": ("a", "b")}, numerical=("inc",))
        users = [
            UserSequence(
                "u1",
                [Basket(0, (1, 3)), Basket(2, (0,))],
                [AttributeRecord(0, (0,), (1.25,)), AttributeRecord(2, (1,), (-0.5,))],
            ),
            UserSequence("u2", [Basket(1, (2,))], [AttributeRecord(1, (1,), (3.0,))]),
        ]
        return Dataset(users, schema, 4), ChronoSplit((0, 2), (2, 3), (3, 4))

    def test_save_then_load_recovers_equal_dataset(self, tmp_path):
        data, split = self._sample()
        save_dataset(data, split, tmp_path)
        loaded, loaded_split = load_dataset(tmp_path)
        assert loaded == data
        assert loaded_split == split

    def test_reload_is_a_fixpoint(self, tmp_path):
        data, split = self._sample()
        save_dataset(data, split, tmp_path / "one")
        first, s1 = load_dataset(tmp_path / "one")
        save_dataset(first, s1, tmp_path / "two")
        second, s2 = load_dataset(tmp_path / "two")
        assert second == first and s2 == s1


class TestSynth:
    def test_same_seed_reproduces_identical_dataset(self):
        cfg = SynthConfig(n_users=12, catalog_size=20, n_steps=20, patterns=("periodic",), period=5)
        a = synth_generate(cfg, seed=3)
        b = synth_generate(cfg, seed=3)
        assert a.dataset == b.dataset and a.metadata == b.metadata
        c = synth_generate(cfg, seed=4)
        assert c.dataset != a.dataset

    def test_period_longer_than_timeline_rejected(self):
        with pytest.raises(ContractError):
            SynthConfig(n_steps=10, period=11)

    def test_periodic_item_appears_only_on_its_cycle(self):
        cfg = SynthConfig(n_users=30, catalog_size=25, n_steps=30, patterns=("periodic",), period=7)
        res = synth_generate(cfg, seed=1)
        for user in res.dataset.users:
            info = res.metadata["users"][user.user_id]
            fav, phase, target = info["item"], info["phase"], info["target_step"]
            for b in user.baskets:
                if fav in b.item_ids:
                    assert b.time_index % cfg.period == phase
            assert user.baskets[-1].time_index == target
            assert fav in user.baskets[-1].item_ids
            assert target == max(t for t in range(cfg.n_steps) if t % cfg.period == phase)
            assert any(b.time_index == target - 1 for b in user.baskets)

    def test_copurchase_pairs_imply_next_step_item(self):
        cfg = SynthConfig(n_users=40, catalog_size=60, n_steps=30, patterns=("copurchase",))
        res = synth_generate(cfg, seed=2)
        pairs = [tuple(p) for p in res.metadata["pairs"]]
        for user in res.dataset.users:
            by_time = {b.time_index: set(b.item_ids) for b in user.baskets}
            for a, b, z in pairs:
                for t, items in by_time.items():
                    if {a, b} <= items:
                        assert z in by_time.get(t + 1, set()), (user.user_id, t)
                    if z in items:
                        assert {a, b} <= by_time.get(t - 1, set()), (user.user_id, t)
            info = res.metadata["users"][user.user_id]
            target = pairs[info["test_pair"]][2]
            assert user.baskets[-1].item_ids == (target,)

    def test_attribute_switch_flips_records_and_clusters(self):
        cfg = SynthConfig(n_users=20, catalog_size=40, n_steps=30, patterns=("attribute_switch",))
        res = synth_generate(cfg, seed=5)
        clusters = [set(c) for c in res.metadata["clusters"]]
        for user in res.dataset.users:
            info = res.metadata["users"][user.user_id]
            first, switch = info["initial_value"], info["switch_step"]
            assert [r.time_index for r in user.attribute_records] == list(range(30))
            for r in user.attribute_records:
                expect = first if r.time_index < switch else 1 - first
                assert r.cat_value_ids == (expect,)
            for b in user.baskets:
                pool = clusters[first] if b.time_index < switch else clusters[1 - first]
                assert set(b.item_ids) <= pool
                assert not (switch <= b.time_index < switch + 2)
            assert user.baskets[-1].time_index == 29

    def test_split_reserves_targets_for_test_range(self):
        cfg = SynthConfig(n_users=10, catalog_size=20, n_steps=30, patterns=("periodic",), period=7)
        res = synth_generate(cfg, seed=0)
        chronological_split(res.dataset, res.split)
        for user in res.dataset.users:
            target = res.metadata["users"][user.user_id]["target_step"]
            assert res.split.part_of(target) == "test"

    def test_records_and_baskets_can_be_asynchronous(self):
        cfg = SynthConfig(n_users=6, catalog_size=40, n_steps=30, patterns=("attribute_switch",))
        res = synth_generate(cfg, seed=9)
        user = res.dataset.users[0]
        basket_times = {b.time_index for b in user.baskets}
        record_times = {r.time_index for r in user.attribute_records}
        assert record_times - basket_times, "records should exist at basket-free steps"
        assert records_in(user, (0, 30)) == user.attribute_records
