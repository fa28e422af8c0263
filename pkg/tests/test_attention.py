import numpy as np
import pytest

from setpose import tensor as T
from setpose.attention import (
    AttentionConfig,
    DeformableConfig,
    OddDimension,
    deformable_attention,
    init_deformable_params,
    init_mha_params,
    multi_head_attention,
    scaled_dot_attention,
    sinusoidal_pos_encoding,
)
from setpose.tensor import RngState, ShapeMismatch, Tape, Tensor, backward, finite_diff_grad, grad_of, max_rel_error

from oracles import attention_scalar, deformable_scalar, multi_head_scalar


# -- scaled dot-product attention ----------------------------------------------


def test_single_key_returns_value_row():
    q = Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 3)))
    k = Tensor([[0.3, -0.2, 0.9]])
    v = Tensor([[1.5, -2.0]])
    out = scaled_dot_attention(q, k, v)
    assert np.allclose(out.data, np.tile(v.data, (4, 1)), atol=1e-15)


def test_zero_queries_average_values():
    rng = np.random.default_rng(1)
    v = rng.uniform(-1, 1, (5, 3))
    out = scaled_dot_attention(Tensor(np.zeros((2, 4))), Tensor(rng.uniform(-1, 1, (5, 4))), Tensor(v))
    assert np.allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)


def test_matches_scalar_oracle():
    q = [[0.5], [-1.0]]
    k = [[2.0], [0.3]]
    v = [[1.0, -1.0], [0.5, 2.0]]
    out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    assert np.allclose(out.data, attention_scalar(q, k, v), atol=1e-12)


def test_output_is_convex_combination_of_values():
    rng = np.random.default_rng(2)
    for _ in range(10):
        v = rng.uniform(-3, 3, (6, 4))
        out = scaled_dot_attention(
            Tensor(rng.uniform(-2, 2, (5, 3))), Tensor(rng.uniform(-2, 2, (6, 3))), Tensor(v)
        )
        lo, hi = v.min(axis=0), v.max(axis=0)
        assert np.all(out.data >= lo - 1e-12) and np.all(out.data <= hi + 1e-12)


def test_key_value_permutation_invariance():
    rng = np.random.default_rng(3)
    q = Tensor(rng.uniform(-2, 2, (4, 3)))
    k = rng.uniform(-2, 2, (6, 3))
    v = rng.uniform(-2, 2, (6, 5))
    base = scaled_dot_attention(q, Tensor(k), Tensor(v)).data
    for _ in range(20):
        perm = rng.permutation(6)
        out = scaled_dot_attention(q, Tensor(k[perm]), Tensor(v[perm])).data
        assert np.allclose(out, base, rtol=0, atol=1e-12)


def test_query_permutation_equivariance():
    rng = np.random.default_rng(4)
    q = rng.uniform(-2, 2, (5, 3))
    k = Tensor(rng.uniform(-2, 2, (6, 3)))
    v = Tensor(rng.uniform(-2, 2, (6, 2)))
    base = scaled_dot_attention(Tensor(q), k, v).data
    perm = rng.permutation(5)
    out = scaled_dot_attention(Tensor(q[perm]), k, v).data
    assert np.array_equal(out, base[perm])


def test_attention_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))


# -- multi-head -------------------------------------------------------------------


def test_single_head_identity_projection_degenerates():
    cfg = AttentionConfig(d_model=3, heads=1)
    eye = Tensor(np.eye(3))
    params = {"wq.0": eye, "wk.0": eye, "wv.0": eye, "wo": eye}
    rng = np.random.default_rng(5)
    x_q = rng.uniform(-1, 1, (4, 3))
    x_kv = rng.uniform(-1, 1, (6, 3))
    out = multi_head_attention(Tensor(x_q), Tensor(x_kv), cfg, params)
    ref = scaled_dot_attention(Tensor(x_q), Tensor(x_kv), Tensor(x_kv))
    assert np.allclose(out.data, ref.data, atol=1e-15)


def test_multi_head_kv_permutation_invariance():
    cfg = AttentionConfig(d_model=4, heads=2)
    params = init_mha_params(cfg, RngState(6))
    rng = np.random.default_rng(7)
    x_q = Tensor(rng.uniform(-1, 1, (3, 4)))
    x_kv = rng.uniform(-1, 1, (5, 4))
    base = multi_head_attention(x_q, Tensor(x_kv), cfg, params).data
    out = multi_head_attention(x_q, Tensor(x_kv[::-1].copy()), cfg, params).data
    assert np.allclose(out, base, atol=1e-12)


def test_multi_head_matches_scalar_oracle():
    cfg = AttentionConfig(d_model=4, heads=2)
    rng = np.random.default_rng(8)
    w_q = [rng.uniform(-1, 1, (4, 2)) for _ in range(2)]
    w_k = [rng.uniform(-1, 1, (4, 2)) for _ in range(2)]
    w_v = [rng.uniform(-1, 1, (4, 2)) for _ in range(2)]
    w_o = rng.uniform(-1, 1, (4, 4))
    params = {"wo": Tensor(w_o)}
    for h in range(2):
        params[f"wq.{h}"] = Tensor(w_q[h])
        params[f"wk.{h}"] = Tensor(w_k[h])
        params[f"wv.{h}"] = Tensor(w_v[h])
    x_q = rng.uniform(-1, 1, (3, 4))
    x_kv = rng.uniform(-1, 1, (5, 4))
    out = multi_head_attention(Tensor(x_q), Tensor(x_kv), cfg, params)
    ref = multi_head_scalar(
        x_q.tolist(), x_kv.tolist(), 2, [m.tolist() for m in w_q], [m.tolist() for m in w_k],
        [m.tolist() for m in w_v], w_o.tolist(),
    )
    assert np.allclose(out.data, ref, atol=1e-10)


def test_attention_config_validation():
    with pytest.raises(ShapeMismatch):
        AttentionConfig(d_model=5, heads=2)


# -- positional encodings -----------------------------------------------------------


def test_pos_encoding_at_origin():
    enc = sinusoidal_pos_encoding(3, 6).data
    assert np.array_equal(enc[0, 0::2], np.zeros(3))
    assert np.array_equal(enc[0, 1::2], np.ones(3))


def test_pos_encoding_bounded():
    enc = sinusoidal_pos_encoding(50, 8).data
    assert np.all(enc >= -1.0) and np.all(enc <= 1.0)


def test_pos_encoding_first_sin_channel():
    enc = sinusoidal_pos_encoding(2, 4).data
    assert enc[1, 0] == pytest.approx(np.sin(1.0), abs=1e-12)


def test_pos_encoding_rejects_odd_dim():
    with pytest.raises(OddDimension):
        sinusoidal_pos_encoding(4, 5)


# -- deformable attention --------------------------------------------------------------


def _zeroed_offset_params(d_model, p):
    return {
        "w_off": Tensor(np.zeros((d_model, 2 * p))),
        "b_off": Tensor(np.zeros(2 * p)),
        "w_aw": Tensor(np.zeros((d_model, p))),
        "b_aw": Tensor(np.zeros(p)),
        "w_out": Tensor(np.eye(d_model)),
        "b_out": Tensor(np.zeros(d_model)),
    }


def test_zero_offsets_sample_reference_exactly():
    rng = np.random.default_rng(9)
    fmap = rng.uniform(-1, 1, (3, 4, 2))
    cfg = DeformableConfig(sample_points=1)
    params = _zeroed_offset_params(2, 1)
    refs = [(1.0, 2.0), (3.0, 0.0)]
    out = deformable_attention(Tensor(rng.uniform(-1, 1, (2, 2))), refs, Tensor(fmap), cfg, params)
    assert np.allclose(out.data, [fmap[2, 1], fmap[0, 3]], atol=1e-15)


def test_constant_map_ignores_geometry():
    # reference points stay interior so every sample lands inside the map
    # (outside, the zero-padding convention would break constancy)
    cfg = DeformableConfig(sample_points=3)
    params = init_deformable_params(2, cfg, RngState(10))
    fmap = Tensor(np.full((10, 10, 2), 0.7))
    q = Tensor(np.random.default_rng(11).uniform(-1, 1, (3, 2)))
    out_a = deformable_attention(q, [(4.0, 4.0), (5.0, 5.0), (3.5, 6.0)], fmap, cfg, params).data
    out_b = deformable_attention(q, [(6.0, 3.5), (4.5, 4.5), (5.0, 4.0)], fmap, cfg, params).data
    assert np.allclose(out_a, out_b, atol=1e-12)


def test_deformable_matches_scalar_oracle():
    d_model, p = 2, 2
    cfg = DeformableConfig(sample_points=p)
    rng = np.random.default_rng(12)
    grid = rng.uniform(-1, 1, (3, 3, d_model))
    params = {
        "w_off": Tensor(rng.uniform(-0.5, 0.5, (d_model, 2 * p))),
        "b_off": Tensor(rng.uniform(-0.5, 0.5, 2 * p)),
        "w_aw": Tensor(rng.uniform(-0.5, 0.5, (d_model, p))),
        "b_aw": Tensor(rng.uniform(-0.5, 0.5, p)),
        "w_out": Tensor(rng.uniform(-0.5, 0.5, (d_model, d_model))),
        "b_out": Tensor(rng.uniform(-0.5, 0.5, d_model)),
    }
    queries = rng.uniform(-1, 1, (3, d_model))
    refs = [(0.5, 0.5), (1.5, 1.0), (2.0, 2.0)]
    out = deformable_attention(Tensor(queries), refs, Tensor(grid), cfg, params)
    ref = deformable_scalar(
        queries.tolist(),
        [list(r) for r in refs],
        grid.tolist(),
        params["w_off"].data.tolist(),
        params["b_off"].data.tolist(),
        params["w_aw"].data.tolist(),
        params["b_aw"].data.tolist(),
        params["w_out"].data.tolist(),
        params["b_out"].data.tolist(),
        p,
    )
    assert np.allclose(out.data, ref, atol=1e-10)


# -- module-wide gradient checks ---------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_scaled_dot_attention_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    k = Tensor(rng.uniform(-2, 2, (4, 3)))
    v = Tensor(rng.uniform(-2, 2, (4, 2)))
    w = Tensor(rng.uniform(-2, 2, (3, 2)))
    q0 = rng.uniform(-2, 2, (3, 3))

    def f(q):
        return (scaled_dot_attention(q, k, v) * w).sum()

    tape = Tape()
    q = tape.leaf(q0)
    grads = backward(tape, f(q))
    numeric = finite_diff_grad(f, Tensor(q0), eps=1e-5)
    assert max_rel_error(grad_of(grads, q), numeric.data) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_deformable_gradients_through_offsets(seed):
    d_model, p = 2, 2
    cfg = DeformableConfig(sample_points=p)
    rng = np.random.default_rng(200 + seed)
    fmap = Tensor(rng.uniform(-2, 2, (4, 4, d_model)))
    refs = rng.uniform(0.7, 2.3, (3, 2))
    queries = Tensor(rng.uniform(-1, 1, (3, d_model)))
    w = Tensor(rng.uniform(-1, 1, (3, d_model)))
    w_off0 = rng.uniform(-0.3, 0.3, (d_model, 2 * p))
    fixed = init_deformable_params(d_model, cfg, RngState(300 + seed))

    def f(w_off):
        params = dict(fixed)
        params["w_off"] = w_off
        return (deformable_attention(queries, refs, fmap, cfg, params) * w).sum()

    tape = Tape()
    w_off = tape.leaf(w_off0)
    grads = backward(tape, f(w_off))
    numeric = finite_diff_grad(f, Tensor(w_off0), eps=1e-5)
    assert max_rel_error(grad_of(grads, w_off), numeric.data) <= 1e-4
