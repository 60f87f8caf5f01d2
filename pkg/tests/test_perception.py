"""Perception stack: encoder, slot init, corrector, decoder."""

import numpy as np
import pytest

from statm import nn
from statm import perception as P
from statm import tensor as T
from statm.errors import ConfigurationError, ContractViolation
from statm.tensor import Tensor

from test_statm import np_layer_norm


def small_dims(frame_hw=16, d=8):
    return P.PerceptionDims(frame_hw=frame_hw, patch=4, feature_dim=d, slot_dim=d,
                            slot_mlp_hidden=2 * d, decoder_hidden=8, box_hidden=8)


def make_params(dims, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return nn.make_trainable(P.init_perception_params(rng, dims, dtype))


# --- encoder -----------------------------------------------------------------

def test_encoder_location_count():
    dims = P.PerceptionDims(frame_hw=32, patch=4)
    params = make_params(dims, seed=1)
    frame = np.zeros((32, 32, 3), dtype=np.float32)
    fm = P.encode_frame(frame, params, dims)
    assert fm.features.shape == (64, dims.feature_dim)
    assert fm.grid.shape == (64, 4)


def test_encoder_rejects_non_divisible_frame():
    dims = P.PerceptionDims(frame_hw=30, patch=4)
    params = make_params(dims, seed=1)
    with pytest.raises(ConfigurationError):
        P.encode_frame(np.zeros((30, 30, 3), np.float32), params, dims)


def np_encode(frame, p, dims):
    """Straight-line encoder reimplementation."""
    patches = P.patchify(frame.astype(np.float64), dims.patch)
    grid = P.border_grid(frame.shape[0] // dims.patch, frame.shape[1] // dims.patch)
    x = patches @ p["enc_patch_w"].data + p["enc_patch_b"].data
    x = x + grid.astype(np.float64) @ p["enc_pos_w"].data
    x = np_layer_norm(x, p["enc_ln_g"].data, p["enc_ln_b"].data)
    h = np.maximum(x @ p["enc_mlp1_w"].data + p["enc_mlp1_b"].data, 0.0)
    return h @ p["enc_mlp2_w"].data + p["enc_mlp2_b"].data


def test_encoder_matches_straight_line_reference():
    dims = small_dims()
    params = make_params(dims, seed=2)
    frame = np.random.default_rng(3).uniform(size=(16, 16, 3)).astype(np.float32)
    got = P.encode_frame(frame, params, dims).features.data
    assert np.allclose(got, np_encode(frame, params, dims), atol=1e-6)


def test_encoder_zero_frame_equals_positional_contribution():
    dims = small_dims()
    params = make_params(dims, seed=4)
    params["enc_patch_b"] = Tensor(np.zeros_like(params["enc_patch_b"].data))
    got = P.encode_frame(np.zeros((16, 16, 3), np.float32), params, dims).features.data
    # positional path only: pos @ pos_w through the same LN + MLP
    grid = P.border_grid(4, 4).astype(np.float64)
    x = grid @ params["enc_pos_w"].data
    x = np_layer_norm(x, params["enc_ln_g"].data, params["enc_ln_b"].data)
    h = np.maximum(x @ params["enc_mlp1_w"].data + params["enc_mlp1_b"].data, 0.0)
    want = h @ params["enc_mlp2_w"].data + params["enc_mlp2_b"].data
    assert np.allclose(got, want, atol=1e-6)


# --- slot init ---------------------------------------------------------------

def test_gaussian_init_reproducible():
    dims = small_dims()
    params = make_params(dims, seed=5)
    a = P.init_slots(P.GAUSSIAN, 4, 8, seed=9, params=params)
    b = P.init_slots(P.GAUSSIAN, 4, 8, seed=9, params=params)
    assert a.slots.data.tobytes() == b.slots.data.tobytes()
    c = P.init_slots(P.GAUSSIAN, 4, 8, seed=10, params=params)
    assert a.slots.data.tobytes() != c.slots.data.tobytes()


def test_hints_identical_boxes_give_identical_slots():
    dims = small_dims()
    params = make_params(dims, seed=6)
    boxes = np.array([[0.1, 0.1, 0.4, 0.5], [0.1, 0.1, 0.4, 0.5]], np.float32)
    out = P.init_slots(P.HINTS, 3, 8, seed=0, params=params,
                       hints=P.Hints(boxes))
    assert np.array_equal(out.slots.data[0], out.slots.data[1])


def test_hints_fill_leading_slots_gaussian_fills_rest():
    dims = small_dims()
    params = make_params(dims, seed=7)
    rng = np.random.default_rng(8)
    boxes = rng.uniform(0, 0.5, size=(3, 4)).astype(np.float32)
    boxes[:, 2:] += 0.5
    out = P.init_slots(P.HINTS, 5, 8, seed=3, params=params, hints=P.Hints(boxes))
    gauss = P.init_slots(P.GAUSSIAN, 5, 8, seed=3, params=params)
    with T.no_grad():
        cond = nn.mlp2(Tensor(boxes), params, "init_box")
    assert np.allclose(out.slots.data[:3], cond.data, atol=1e-6)
    assert np.array_equal(out.slots.data[3:], gauss.slots.data[3:])


def test_init_mode_hint_contract():
    dims = small_dims()
    params = make_params(dims, seed=7)
    with pytest.raises(ContractViolation):
        P.init_slots(P.HINTS, 3, 8, seed=0, params=params)
    with pytest.raises(ContractViolation):
        P.init_slots(P.GAUSSIAN, 3, 8, seed=0, params=params,
                     hints=P.Hints(np.zeros((1, 4), np.float32)))


def test_hints_reject_inverted_box():
    with pytest.raises(ConfigurationError):
        P.Hints(np.array([[0.5, 0.5, 0.1, 0.9]], np.float32))


# --- corrector ---------------------------------------------------------------

def frame_and_features(dims, params, seed):
    rng = np.random.default_rng(seed)
    frame = rng.uniform(size=(dims.frame_hw, dims.frame_hw, 3)).astype(np.float32)
    return frame, P.encode_frame(frame, params, dims)


def test_attention_columns_sum_to_one():
    dims = small_dims()
    params = make_params(dims, seed=10)
    _, fm = frame_and_features(dims, params, 11)
    slots = P.init_slots(P.GAUSSIAN, 3, 8, seed=1, params=params)
    attn = P.slot_attention_weights(slots, fm, params)
    assert np.allclose(attn.sum(axis=0), 1.0, atol=1e-6)


def test_correct_permutation_equivariance():
    dims = small_dims()
    params = make_params(dims, seed=12)
    _, fm = frame_and_features(dims, params, 13)
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        s = rng.normal(size=(4, 8)).astype(np.float32)
        perm = rng.permutation(4)
        from statm.memory import SlotSet
        out = P.correct(SlotSet(Tensor(s), 0), fm, params, 1).slots.data
        out_p = P.correct(SlotSet(Tensor(s[perm]), 0), fm, params, 1).slots.data
        assert out_p.tobytes() == out[perm].tobytes()


def test_single_slot_update_is_direct_mean_of_values():
    dims = small_dims()
    params = make_params(dims, seed=14)
    _, fm = frame_and_features(dims, params, 15)
    s = np.random.default_rng(16).normal(size=(1, 8)).astype(np.float32)
    from statm.memory import SlotSet
    got = P.correct(SlotSet(Tensor(s), 0), fm, params, 1).slots.data

    # straight-line path with the update replaced by the plain mean
    f = np_layer_norm(fm.features.data, params["corr_ln_in_g"].data,
                      params["corr_ln_in_b"].data)
    vals = f @ params["corr_v_w"].data
    upd = vals.mean(axis=0, keepdims=True)  # single slot: attention weights 1/L

    def np_gru(x, h, p):
        d = h.shape[-1]
        gx = x @ p["corr_gru_wx"].data + p["corr_gru_bx"].data
        gh = h @ p["corr_gru_wh"].data + p["corr_gru_bh"].data
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        z = sig(gx[..., :d] + gh[..., :d])
        r = sig(gx[..., d:2 * d] + gh[..., d:2 * d])
        n = np.tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
        return (1 - z) * n + z * h

    h = np_gru(upd, s.astype(np.float64), params)
    hn = np_layer_norm(h, params["corr_ln_mlp_g"].data, params["corr_ln_mlp_b"].data)
    m = np.maximum(hn @ params["corr_mlp1_w"].data + params["corr_mlp1_b"].data, 0)
    want = h + (m @ params["corr_mlp2_w"].data + params["corr_mlp2_b"].data)
    assert np.allclose(got, want, atol=1e-5)

    attn = P.slot_attention_weights(SlotSet(Tensor(s), 0), fm, params)
    assert np.allclose(attn, 1.0, atol=1e-6)


def test_more_iterations_change_output():
    dims = small_dims()
    params = make_params(dims, seed=17)
    _, fm = frame_and_features(dims, params, 18)
    slots = P.init_slots(P.GAUSSIAN, 3, 8, seed=2, params=params)
    a = P.correct(slots, fm, params, 1).slots.data
    b = P.correct(slots, fm, params, 2).slots.data
    assert not np.allclose(a, b)


def test_correct_rejects_zero_iterations():
    dims = small_dims()
    params = make_params(dims, seed=17)
    _, fm = frame_and_features(dims, params, 18)
    slots = P.init_slots(P.GAUSSIAN, 3, 8, seed=2, params=params)
    with pytest.raises(ContractViolation):
        P.correct(slots, fm, params, 0)


# --- decoder -----------------------------------------------------------------

def test_alpha_sums_to_one_everywhere():
    dims = small_dims()
    params = make_params(dims, seed=19)
    slots = P.init_slots(P.GAUSSIAN, 3, 8, seed=4, params=params)
    _, alpha, _ = P.decode_and_compose(slots, params, (16, 16))
    assert np.allclose(alpha.data.sum(axis=0), 1.0, atol=1e-6)


def test_frame_is_convex_combination_of_slot_rgb():
    dims = small_dims()
    params = make_params(dims, seed=20)
    slots = P.init_slots(P.GAUSSIAN, 4, 8, seed=5, params=params)
    frame, alpha, _ = P.decode_and_compose(slots, params, (16, 16))
    # recompute per-slot rgb straight-line to get the per-pixel bounds
    s = slots.slots.data.astype(np.float64)
    pos = P.border_grid(16, 16).astype(np.float64)
    h1 = np.maximum((s @ params["dec_w1s"].data)[:, None, :]
                    + pos @ params["dec_w1p"].data + params["dec_b1"].data, 0)
    h2 = np.maximum(h1 @ params["dec_w2"].data + params["dec_b2"].data, 0)
    out = h2 @ params["dec_w3"].data + params["dec_b3"].data
    rgb = out[..., :3].reshape(4, 16, 16, 3)
    lo, hi = rgb.min(axis=0), rgb.max(axis=0)
    f = frame.data
    assert np.all(f >= lo - 1e-5) and np.all(f <= hi + 1e-5)


def test_identical_slots_give_uniform_alpha_and_zero_mask():
    dims = small_dims()
    params = make_params(dims, seed=21)
    one = np.random.default_rng(22).normal(size=(1, 8)).astype(np.float32)
    slots = Tensor(np.repeat(one, 3, axis=0))
    from statm.memory import SlotSet
    _, alpha, mask = P.decode_and_compose(SlotSet(slots, 0), params, (16, 16))
    assert np.allclose(alpha.data, 1.0 / 3.0, atol=1e-6)
    assert np.all(mask == 0)


def test_decode_permutation_equivariance():
    dims = small_dims()
    params = make_params(dims, seed=23)
    rng = np.random.default_rng(24)
    s = rng.normal(size=(4, 8)).astype(np.float32)
    perm = rng.permutation(4)
    from statm.memory import SlotSet
    f, a, m = P.decode_and_compose(SlotSet(Tensor(s), 0), params, (16, 16))
    f2, a2, m2 = P.decode_and_compose(SlotSet(Tensor(s[perm]), 0), params, (16, 16))
    assert a2.data.tobytes() == a.data[perm].tobytes()
    assert f2.data.tobytes() == f.data.tobytes()
    inv = np.argsort(perm)
    assert np.array_equal(m2, inv[m])


# --- end-to-end differentiability --------------------------------------------

def test_full_path_finite_difference():
    dims = small_dims(frame_hw=16, d=8)
    rng = np.random.default_rng(25)
    params = nn.make_trainable(P.init_perception_params(rng, dims, np.float64))
    frame = rng.uniform(size=(16, 16, 3))
    patches = Tensor(P.patchify(frame, dims.patch), requires_grad=True)
    grid = P.border_grid(4, 4)
    target = Tensor(rng.uniform(size=(16, 16, 3)))
    probe = [patches, params["enc_patch_w"], params["corr_q_w"],
             params["corr_gru_wh"], params["dec_w1s"], params["dec_w3"],
             params["init_scale"]]

    def fn(inputs):
        feats = P.encode_patches(inputs[0], grid, params)
        fm = P.FeatureMap(feats, grid)
        init = P.init_slots(P.GAUSSIAN, 2, 8, seed=6, params=params)
        slots = P.correct(init, fm, params, 1)
        f, _, _ = P.decode_and_compose(slots, params, (16, 16))
        diff = T.add(f, T.mul(target, -1.0))
        return T.mean_(T.mul(diff, diff))

    err = T.finite_difference_check(fn, probe, eps=1e-5)
    assert err < 1e-3
