"""Tests for the assembled model: config, variants, forward, loss, checkpoints."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from gradcheck import check_gradients
from oracles import brute_bce, brute_mhsab

from nextbasket.data import AttributeRecord, AttributeSchema, Basket, ChronoSplit, Dataset, UserSequence
from nextbasket.errors import CheckpointError, ConfigError, ContractError
from nextbasket.model import (
    ModelConfig,
    NextBasketModel,
    VARIANT_TAGS,
    bce_loss,
    build_targets,
    load_checkpoint,
    make_variant,
    save_checkpoint,
)
from nextbasket.tensor import Tensor


def small_schema():
    return AttributeSchema(categorical={"seg": ("a", "b"), "tier": ("x", "y")}, numerical=("inc",))


def small_config(**overrides):
    fields = dict(
        schema=small_schema(),
        catalog_size=6,
        v_max=3,
        dim=4,
        seq_len=4,
        period=3,
        time_heads=(1,),
        intra_heads=(1,),
        dropout=0.0,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def small_users():
    return [
        UserSequence(
            "u1",
            [Basket(0, (1, 3)), Basket(2, (2,)), Basket(3, (0, 4, 5))],
            [AttributeRecord(0, (0, 2), (0.5,)), AttributeRecord(2, (1, 3), (-0.25,))],
        ),
        UserSequence(
            "u2",
            [Basket(1, (5,)), Basket(2, (0, 1))],
            [AttributeRecord(1, (1, 2), (0.0,))],
        ),
    ]


class TestConfig:
    def test_rejects_bad_extents(self):
        with pytest.raises(ConfigError):
            small_config(dim=1)
        with pytest.raises(ConfigError):
            small_config(time_heads=())
        with pytest.raises(ConfigError):
            small_config(dropout=1.0)
        with pytest.raises(ConfigError):
            small_config(padding_mode="middle")
        small_config(intra_heads=())  # zero intra depth is a legal ablation

    def test_widths_follow_declared_formulas(self):
        cfg = small_config()
        assert cfg.width_items == (3 + 2) * 4
        assert cfg.width_cats == (2 + 2) * 4
        assert cfg.width_nums == 1 + 2 * 4
        assert cfg.fusion_width == cfg.width_items + cfg.width_cats + cfg.width_nums
        slim = small_config(use_periodic=False)
        assert slim.width_items == (3 + 1) * 4

    def test_from_dataset_sizes_v_max_on_train_range_only(self):
        users = [
            UserSequence("u", [Basket(0, (0, 1)), Basket(6, (0, 1, 2, 3, 4))]),
        ]
        data = Dataset(users, AttributeSchema(), 6)
        split = ChronoSplit((0, 4), (4, 6), (6, 8))
        cfg = ModelConfig.from_dataset(data, split, dim=4)
        assert cfg.v_max == 2
        assert cfg.catalog_size == 6

    def test_json_round_trip(self):
        cfg = small_config(use_periodic=False, time_heads=(2, 1))
        assert ModelConfig.from_json(cfg.to_json()) == cfg


class TestVariants:
    def test_flag_mapping(self):
        cfg = small_config()
        assert make_variant(cfg, "Full") == cfg
        assert make_variant(cfg, "P").use_periodic is False
        b = make_variant(cfg, "B")
        assert b.use_attributes is False and b.use_intra_basket is True
        bm = make_variant(cfg, "B-")
        assert bm.use_attributes is False and bm.use_intra_basket is False
        t = make_variant(cfg, "T")
        assert t.use_intra_basket is False and t.use_intra_attribute is False
        i = make_variant(cfg, "I")
        assert i.use_time_level is False and i.use_intra_basket is True

    def test_unknown_tag_rejected(self):
        with pytest.raises(ConfigError, match="unknown variant"):
            make_variant(small_config(), "Q")

    def test_parameter_count_is_deterministic_per_config(self):
        counts = {}
        for tag in VARIANT_TAGS:
            cfg = make_variant(small_config(), tag)
            a = NextBasketModel(cfg, seed=0)
            b = NextBasketModel(cfg, seed=1)
            assert a.n_parameters == b.n_parameters
            assert list(a.params.named_parameters()) == list(b.params.named_parameters())
            counts[tag] = a.n_parameters
        assert counts["P"] < counts["Full"]  # periodic table and narrower blocks gone
        assert counts["B-"] < counts["B"] < counts["Full"]
        assert counts["I"] < counts["Full"]

    def test_every_variant_runs_forward_with_the_right_widths(self):
        users = small_users()
        for tag in VARIANT_TAGS:
            cfg = make_variant(small_config(), tag)
            model = NextBasketModel(cfg, seed=0)
            _, encoded = model.encode(users)
            assert encoded.items.data.shape[-1] == cfg.width_items
            scores = model.forward(encoded).data
            assert scores.shape == (2, 4, 6)
            assert np.all(np.isfinite(scores))

    def test_variant_parameter_sets_reflect_flags(self):
        names_full = set(NextBasketModel(small_config(), 0).params.named_parameters())
        names_p = set(NextBasketModel(make_variant(small_config(), "P"), 0).params.named_parameters())
        names_b = set(NextBasketModel(make_variant(small_config(), "B"), 0).params.named_parameters())
        names_i = set(NextBasketModel(make_variant(small_config(), "I"), 0).params.named_parameters())
        assert "embed.period" in names_full and "embed.period" not in names_p
        assert not any(n.startswith("time.cats") or n == "embed.value" for n in names_b)
        assert not any(n.startswith("time.") for n in names_i)
        assert any(n.startswith("intra_basket") for n in names_i)


class TestForward:
    def test_score_shape_and_range(self):
        model = NextBasketModel(small_config(), seed=0)
        _, encoded = model.encode(small_users())
        scores = model.forward(encoded).data
        assert scores.shape == (2, 4, 6)
        assert np.all((scores > 0) & (scores < 1))

    def test_zero_fusion_output_scores_one_half(self):
        model = NextBasketModel(small_config(), seed=0)
        model.params.fuse_w2.data[:] = 0.0
        model.params.fuse_b2.data[:] = 0.0
        _, encoded = model.encode(small_users())
        np.testing.assert_array_equal(model.forward(encoded).data, 0.5)

    def test_single_step_window_works(self):
        model = NextBasketModel(small_config(seq_len=1, period=1), seed=0)
        _, encoded = model.encode([UserSequence("u", [Basket(0, (1, 2))])])
        assert model.forward(encoded).data.shape == (1, 1, 6)

    def test_eval_forward_is_pure(self):
        model = NextBasketModel(small_config(dropout=0.3), seed=0)
        _, encoded = model.encode(small_users())
        a = model.forward(encoded).data
        b = model.forward(encoded).data
        assert np.array_equal(a, b)

    def test_mismatched_encoding_rejected(self):
        wide = NextBasketModel(small_config(v_max=4), seed=0)
        narrow = NextBasketModel(small_config(), seed=0)
        _, encoded = narrow.encode(small_users())
        with pytest.raises(ContractError, match="width"):
            wide.forward(encoded)

    def test_fuse_with_no_branches_rejected(self):
        model = NextBasketModel(small_config(), seed=0)
        with pytest.raises(ContractError, match="branch"):
            model.fuse([])


class TestCausality:
    def _scores(self, model, users):
        _, encoded = model.encode(users)
        return model.forward(encoded).data

    def test_changing_the_last_step_never_moves_earlier_scores(self):
        model = NextBasketModel(small_config(time_heads=(2, 1)), seed=1)
        users = small_users()
        base = self._scores(model, users)
        changed = [
            UserSequence(
                "u1",
                [Basket(0, (1, 3)), Basket(2, (2,)), Basket(3, (5,))],
                users[0].attribute_records + [AttributeRecord(3, (1, 3), (0.9,))],
            ),
            users[1],
        ]
        again = self._scores(model, changed)
        assert np.array_equal(base[0, :3], again[0, :3])
        assert not np.array_equal(base[0, 3], again[0, 3])

    def test_attribute_free_variant_ignores_attribute_perturbations(self):
        cfg = make_variant(small_config(), "B")
        model = NextBasketModel(cfg, seed=2)
        users = small_users()
        base = self._scores(model, users)
        perturbed = [
            UserSequence(u.user_id, u.baskets, [
                AttributeRecord(r.time_index, tuple(reversed(r.cat_value_ids)), tuple(v + 5 for v in r.num_values))
                for r in u.attribute_records
            ])
            for u in users
        ]
        assert np.array_equal(base, self._scores(model, perturbed))

    def test_time_level_free_variant_is_still_causal(self):
        model = NextBasketModel(make_variant(small_config(), "I"), seed=3)
        users = small_users()
        base = self._scores(model, users)
        changed = [users[0], UserSequence("u2", [Basket(1, (5,)), Basket(2, (3, 4))],
                                          users[1].attribute_records)]
        again = self._scores(model, changed)
        assert np.array_equal(base[1, :2], again[1, :2])


class TestIntraOracle:
    def test_intra_refinement_matches_scalar_block(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            cfg = small_config(intra_heads=(int(rng.integers(1, 3)),))
            model = NextBasketModel(cfg, seed=int(rng.integers(1000)))
            n_tok = cfg.v_max + 2
            tokens = rng.normal(size=(1, 2, n_tok * cfg.dim))
            token_real = rng.random((1, 2, n_tok)) < 0.7
            token_real[..., -2:] = True
            flat = tokens * np.repeat(token_real, cfg.dim, axis=-1)
            got = model._intra_refine(
                Tensor(flat), model.params.intra_basket_stack, token_real, False, None, None, "t"
            ).data
            block = model.params.intra_basket_stack[0]
            for t in range(2):
                x = flat[0, t].reshape(n_tok, cfg.dim)
                real = token_real[0, t]
                allowed = np.broadcast_to(real, (n_tok, n_tok)).tolist()
                want = brute_mhsab(
                    x.tolist(),
                    [(h["wq"].data.tolist(), h["wk"].data.tolist(), h["wv"].data.tolist()) for h in block.heads],
                    block.w_concat.data.tolist(),
                    (block.ffn_w1.data.tolist(), block.ffn_b1.data.tolist(),
                     block.ffn_w2.data.tolist(), block.ffn_b2.data.tolist()),
                    (block.ln1_gain.data.tolist(), block.ln1_bias.data.tolist(),
                     block.ln2_gain.data.tolist(), block.ln2_bias.data.tolist()),
                    allowed,
                    real.tolist(),
                    1.0 / np.sqrt(cfg.dim),
                )
                np.testing.assert_allclose(got[0, t].reshape(n_tok, cfg.dim), want, atol=1e-10)

    def test_empty_intra_stack_is_identity(self):
        cfg = small_config(intra_heads=())
        model = NextBasketModel(cfg, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, (cfg.v_max + 2) * cfg.dim)))
        out = model._intra_refine(x, model.params.intra_basket_stack, np.ones((1, 2, 5), bool), False, None, None, "t")
        assert out is x


class TestTargetsAndLoss:
    def test_targets_shift_by_one_step(self):
        model = NextBasketModel(small_config(), seed=0)
        layouts, _ = model.encode(small_users())
        targets, valid = build_targets(layouts, 6)
        # u1: window steps 0..3, baskets at 0,2,3; step 2 predicts step 3
        assert valid[0].tolist() == [False, False, True, False]
        np.testing.assert_array_equal(targets[0, 2], [1, 0, 0, 0, 1, 1])
        # u2: window steps -1..2 -> slots 2,3 hold baskets at 1,2
        assert valid[1].tolist() == [False, False, True, False]
        np.testing.assert_array_equal(targets[1, 2], [1, 1, 0, 0, 0, 0])

    def test_all_zero_logits_cost_vocab_times_log_two_per_step(self):
        logits = Tensor(np.zeros((1, 1, 4)))
        targets = np.zeros((1, 1, 4))
        targets[0, 0, 2] = 1.0
        valid = np.ones((1, 1), dtype=bool)
        loss = bce_loss(logits, targets, valid)
        np.testing.assert_allclose(loss.item(), 4 * np.log(2), atol=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        logits = np.full((1, 1, 4), -30.0)
        logits[0, 0, 2] = 30.0
        targets = np.zeros((1, 1, 4))
        targets[0, 0, 2] = 1.0
        loss = bce_loss(Tensor(logits), targets, np.ones((1, 1), bool))
        assert loss.item() < 1e-12

    def test_matches_scalar_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            steps, vocab = int(rng.integers(1, 5)), int(rng.integers(2, 7))
            logits = rng.normal(size=(1, steps, vocab)) * 3
            valid = rng.random(steps) < 0.7
            target_sets = [set(map(int, rng.choice(vocab, size=rng.integers(1, vocab), replace=False)))
                           for _ in range(steps)]
            if not valid.any():
                valid[0] = True
            targets = np.zeros((1, steps, vocab))
            for t, s in enumerate(target_sets):
                targets[0, t, list(s)] = 1.0
            got = bce_loss(Tensor(logits), targets, valid[None, :]).item()
            want = brute_bce(logits[0].tolist(), target_sets, valid.tolist())
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_target_enumeration_order_is_irrelevant(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(1, 2, 5)))
        forward_order = np.zeros((1, 2, 5))
        for item in (1, 3, 4):
            forward_order[0, 0, item] = 1.0
        reverse_order = np.zeros((1, 2, 5))
        for item in (4, 3, 1):
            reverse_order[0, 0, item] = 1.0
        valid = np.array([[True, False]])
        assert bce_loss(logits, forward_order, valid).item() == bce_loss(logits, reverse_order, valid).item()

    def test_no_valid_step_rejected(self):
        with pytest.raises(ContractError, match="valid step"):
            bce_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2, 3)), np.zeros((1, 2), bool))

    def test_step_normalization_divides_by_valid_count(self):
        logits = Tensor(np.zeros((1, 2, 4)))
        targets = np.zeros((1, 2, 4))
        targets[:, :, 1] = 1.0
        valid = np.ones((1, 2), bool)
        total = bce_loss(logits, targets, valid).item()
        per_step = bce_loss(logits, targets, valid, normalize="steps").item()
        np.testing.assert_allclose(per_step, total / 2)


class TestEndToEndGradients:
    def test_full_model_gradcheck_on_tiny_config(self):
        cfg = small_config()
        model = NextBasketModel(cfg, seed=4)
        layouts, encoded_ref = model.encode(small_users())
        targets, valid = build_targets(layouts, cfg.catalog_size)
        users = small_users()

        def forward():
            _, encoded = model.encode(users)
            return bce_loss(model.forward_logits(encoded), targets, valid)

        tensors = list(model.params.named_parameters().values())
        check_gradients(forward, tensors, max_coords=3, rng=np.random.default_rng(0))


class TestCheckpoint:
    def test_round_trip_restores_float32_cast_of_every_parameter(self, tmp_path):
        model = NextBasketModel(small_config(), seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, extra={"epoch": 3})
        loaded, extra = load_checkpoint(path)
        assert extra == {"epoch": 3}
        for name, tensor in model.params.named_parameters().items():
            np.testing.assert_array_equal(
                loaded.params.named_parameters()[name].data,
                tensor.data.astype(np.float32).astype(np.float64),
                err_msg=name,
            )

    def test_second_round_trip_is_byte_identical(self, tmp_path):
        model = NextBasketModel(small_config(), seed=6)
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(first, model)
        loaded, _ = load_checkpoint(first)
        save_checkpoint(second, loaded)
        assert first.read_bytes() == second.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        model = NextBasketModel(small_config(), seed=7)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_corrupted_values_fail_the_checksum(self, tmp_path):
        model = NextBasketModel(small_config(), seed=8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"whatever")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_config_mismatch_names_the_field(self, tmp_path):
        model = NextBasketModel(small_config(), seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        other = small_config(period=5)
        with pytest.raises(ContractError, match="period"):
            load_checkpoint(path, expected_config=other)
