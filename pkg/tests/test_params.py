import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskfuse import params as pp

from conftest import toy_param_set


def make_vec(values, task_id="t", user=1, hash_="cfg0"):
    ps = toy_param_set({"patch_embed": np.asarray(values, dtype=float)}, hash_=hash_)
    return pp.TaskVector(delta=ps, task_id=task_id, source_user=user)


class TestComputeTaskVector:
    def test_identity_gives_zero_delta(self):
        base = toy_param_set()
        tau = pp.compute_task_vector(base, base)
        assert all(np.all(v == 0) for v in tau.delta.groups.values())
        assert not tau.is_perturbed

    def test_zero_base_gives_fine(self):
        fine = toy_param_set()
        base = fine.map_groups(np.zeros_like)
        tau = pp.compute_task_vector(fine, base)
        for k in fine.groups:
            np.testing.assert_array_equal(tau.delta.groups[k], fine.groups[k])

    def test_elementwise_subtraction(self):
        fine = toy_param_set({"patch_embed": np.array([1.5, -2.0])})
        base = toy_param_set({"patch_embed": np.array([0.5, 1.0])})
        tau = pp.compute_task_vector(fine, base)
        np.testing.assert_array_equal(tau.delta.groups["patch_embed"],
                                      np.array([1.0, -3.0]))

    def test_incompatible_names_first_mismatch(self):
        a = toy_param_set({"patch_embed": np.zeros(2), "head": np.zeros(1)})
        b = toy_param_set({"patch_embed": np.zeros(2), "mlp0": np.zeros(1)})
        with pytest.raises(pp.IncompatibleParametersError, match="head"):
            pp.compute_task_vector(a, b)

    def test_incompatible_length(self):
        a = toy_param_set({"patch_embed": np.zeros(2)})
        b = toy_param_set({"patch_embed": np.zeros(3)})
        with pytest.raises(pp.IncompatibleParametersError, match="patch_embed"):
            pp.compute_task_vector(a, b)

    def test_incompatible_hash(self):
        a = toy_param_set(hash_="cfgA")
        b = toy_param_set(hash_="cfgB")
        with pytest.raises(pp.IncompatibleParametersError, match="model_config_hash"):
            pp.compute_task_vector(a, b)


class TestAddScaled:
    def test_lambda_zero_returns_base_exactly(self):
        base = toy_param_set({"patch_embed": np.array([0.1, 0.2, 0.3])})
        tau = make_vec([5.0, -1.0, 2.0])
        out = pp.add_scaled(base, [tau], 0.0)
        np.testing.assert_array_equal(out.groups["patch_embed"],
                                      base.groups["patch_embed"])

    def test_single_zero_vector_identity(self):
        base = toy_param_set({"patch_embed": np.array([0.1, 0.2, 0.3])})
        tau = make_vec([0.0, 0.0, 0.0])
        out = pp.add_scaled(base, [tau], 1.0)
        np.testing.assert_array_equal(out.groups["patch_embed"],
                                      base.groups["patch_embed"])

    def test_two_vector_hand_case(self):
        base = toy_param_set({"patch_embed": np.zeros(2)})
        v1 = make_vec([1.0, 0.0], task_id="a", user=1)
        v2 = make_vec([0.0, 2.0], task_id="b", user=2)
        out = pp.add_scaled(base, [v1, v2], 0.5)
        np.testing.assert_allclose(out.groups["patch_embed"], [0.5, 1.0])

    def test_empty_vector_list(self):
        with pytest.raises(ValueError, match="at least one"):
            pp.add_scaled(toy_param_set(), [], 0.5)

    def test_lambda_out_of_range(self):
        with pytest.raises(ValueError, match="lambda"):
            pp.add_scaled(toy_param_set(), [make_vec([0.0, 0.0])], 1.5)

    def test_summation_order_fixed_by_source_user(self):
        # floating-point addition is nonassociative: the result must not
        # depend on the order the caller lists the vectors in
        rng = np.random.default_rng(0)
        base = toy_param_set({"patch_embed": rng.standard_normal(64)})
        vecs = [make_vec(rng.standard_normal(64) * 10.0 ** rng.integers(-8,  8),
                         task_id=f"t{u}", user=u) for u in range(1, 7)]
        a = pp.add_scaled(base, vecs, 0.7)
        b = pp.add_scaled(base, vecs[::-1], 0.7)
        np.testing.assert_array_equal(a.groups["patch_embed"],
                                      b.groups["patch_embed"])


class TestCosineSimilarity:
    def test_self_similarity_is_one(self):
        v = make_vec([1.0, 2.0, 3.0])
        assert pp.cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        a, b = make_vec([1.0, 0.0]), make_vec([0.0, 1.0])
        assert pp.cosine_similarity(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_dot_product_oracle(self):
        a, b = make_vec([1.0, 1.0]), make_vec([1.0, -1.0])
        assert pp.cosine_similarity(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(pp.DegenerateVectorError):
            pp.cosine_similarity(make_vec([0.0, 0.0]), make_vec([1.0, 0.0]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
           st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
           st.floats(1e-3, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_scale_invariance(self, xs, ys, scale):
        a, b = np.asarray(xs), np.asarray(ys)
        if np.linalg.norm(a) < 1e-9 or np.linalg.norm(b) < 1e-9:
            return
        va, vb = make_vec(a), make_vec(b)
        vb_scaled = make_vec(scale * b)
        assert pp.cosine_similarity(va, vb) == pytest.approx(
            pp.cosine_similarity(vb, va), abs=1e-12)
        assert pp.cosine_similarity(va, vb) == pytest.approx(
            pp.cosine_similarity(va, vb_scaled), abs=1e-9)


class TestFlattenSelect:
    @given(st.lists(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1,
                             max_size=8), min_size=1, max_size=4))
    @settings(max_examples=40, deadline=None)
    def test_flatten_unflatten_roundtrip(self, group_values):
        groups = {f"g{i}": np.asarray(v) for i, v in enumerate(group_values)}
        ps = toy_param_set(groups)
        back = pp.unflatten(pp.flatten(ps), ps)
        for k in ps.groups:
            np.testing.assert_array_equal(back.groups[k], ps.groups[k])

    def test_select_one_tag_from_two_groups(self):
        ps = pp.ParameterSet(
            groups={"a": np.zeros(2), "b": np.ones(3)},
            tags={"a": "attention", "b": "mlp"},
            model_config_hash="h")
        sel = pp.group_select(ps, {"attention"})
        assert sel.group_names() == ["a"]
        assert sel.total_dim == 2

    def test_empty_tag_set(self):
        sel = pp.group_select(toy_param_set(), set())
        assert sel.group_names() == []
        assert sel.total_dim == 0

    def test_unknown_tag(self):
        with pytest.raises(ValueError, match="unknown group tags"):
            pp.group_select(toy_param_set(), {"bogus"})

    def test_unflatten_size_mismatch(self):
        ps = toy_param_set()
        with pytest.raises(ValueError, match="total_dim"):
            pp.unflatten(np.zeros(ps.total_dim + 1), ps)


class TestAlgebraicInvariants:
    def test_add_scaled_linearity(self):
        rng = np.random.default_rng(1)
        base = toy_param_set({"patch_embed": rng.standard_normal(32)})
        vecs = [make_vec(rng.standard_normal(32), task_id=f"t{u}", user=u)
                for u in range(1, 4)]
        lam = 0.37
        full = pp.flatten(pp.add_scaled(base, vecs, 1.0)) - pp.flatten(base)
        part = pp.flatten(pp.add_scaled(base, vecs, lam)) - pp.flatten(base)
        np.testing.assert_allclose(part, lam * full, rtol=1e-12, atol=1e-15)

    def test_task_vector_recovery(self):
        # (base + tau) - base recovers tau up to the single rounding of the
        # addition: one ulp of (base + tau) per element
        rng = np.random.default_rng(2)
        b = rng.standard_normal(16)
        t = rng.standard_normal(16)
        base = toy_param_set({"patch_embed": b})
        tau = make_vec(t)
        merged = pp.add_scaled(base, [tau], 1.0)
        back = pp.compute_task_vector(merged, base)
        err = np.abs(back.delta.groups["patch_embed"] - t)
        assert np.all(err <= np.spacing(np.abs(b + t)))


class TestCheckpoint:
    def test_roundtrip_bit_for_bit(self, tmp_path):
        rng = np.random.default_rng(3)
        ps = pp.ParameterSet(
            groups={"a": rng.standard_normal(5), "b": rng.standard_normal(9)},
            tags={"a": "attention", "b": "head"},
            model_config_hash="deadbeef")
        path = tmp_path / "model.ckpt"
        pp.save_checkpoint(path, ps)
        back = pp.load_checkpoint(path)
        assert back.model_config_hash == "deadbeef"
        assert back.tags == ps.tags
        for k in ps.groups:
            assert back.groups[k].tobytes() == ps.groups[k].tobytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x00\x01 not a checkpoint\nxxxx")
        with pytest.raises(ValueError, match="manifest|format"):
            pp.load_checkpoint(path)

    def test_rejects_truncated(self, tmp_path):
        ps = toy_param_set({"patch_embed": np.arange(4.0)})
        path = tmp_path / "t.ckpt"
        pp.save_checkpoint(path, ps)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            pp.load_checkpoint(path)

    def test_clean_vector_cannot_record_noise(self):
        ps = toy_param_set()
        with pytest.raises(ValueError, match="zero noise variance"):
            pp.TaskVector(delta=ps, task_id="t", source_user=1,
                          is_perturbed=False, noise_variance_used=0.5)
