"""Frame encoder, slot initialization, slot-attention corrector, decoder.

The encoder is patch-linear: non-overlapping PxP patches are projected
to the feature width, summed with a projection of a 4-channel grid of
normalized distances to the frame borders, then layer-normed and passed
through a small MLP. The corrector runs slot attention (softmax over
the slot axis, per-slot weighted mean over locations, GRU update,
residual MLP). The decoder broadcasts each slot over the pixel grid and
composites per-slot RGB through a per-pixel softmax over slots.

All functions accept leading batch axes in front of the documented
(N, D) / (L, F) shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from statm import nn
from statm import tensor as T
from statm.errors import ConfigurationError, ContractViolation
from statm.memory import SlotSet
from statm.tensor import Tensor

GAUSSIAN = "gaussian"
HINTS = "hints"

ATTN_EPS = 1e-8  # floor for the per-slot weighted-mean denominator


@dataclass
class PerceptionDims:
    frame_hw: int = 32
    patch: int = 4
    feature_dim: int = 64
    slot_dim: int = 64
    slot_mlp_hidden: int = 128
    decoder_hidden: int = 32
    box_hidden: int = 64

    @property
    def grid_hw(self) -> int:
        return self.frame_hw // self.patch

    @property
    def locations(self) -> int:
        return self.grid_hw * self.grid_hw


@dataclass
class FeatureMap:
    """Per-location features plus the normalized coordinate grid."""

    features: Tensor  # (..., L, F)
    grid: np.ndarray  # (L, 4) border distances


@dataclass
class Hints:
    """First-frame boxes (x0, y0, x1, y1) in [0,1]; invalid rows are unconditioned."""

    boxes: np.ndarray  # (K, 4) or (..., K, 4)
    valid: Optional[np.ndarray] = None  # bool (K,) or (..., K); default all valid

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=np.float32)
        if b.shape[-1] != 4:
            raise ConfigurationError(f"Hints: boxes must end in 4, got {b.shape}")
        object.__setattr__(self, "boxes", b)
        if self.valid is None:
            object.__setattr__(self, "valid", np.ones(b.shape[:-1], dtype=bool))
        else:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != b.shape[:-1]:
                raise ConfigurationError(
                    f"Hints: valid {v.shape} does not match boxes {b.shape}")
            object.__setattr__(self, "valid", v)
        sel = self.valid
        if np.any(b[sel][..., 0] > b[sel][..., 2]) or np.any(b[sel][..., 1] > b[sel][..., 3]):
            raise ConfigurationError("Hints: box min exceeds max")


def init_perception_params(rng: np.random.Generator, dims: PerceptionDims,
                           dtype=np.float32) -> Dict[str, np.ndarray]:
    f, d = dims.feature_dim, dims.slot_dim
    ppc = dims.patch * dims.patch * 3
    p: Dict[str, np.ndarray] = {}
    p["enc_patch_w"] = nn.glorot(rng, (ppc, f), dtype)
    p["enc_patch_b"] = nn.zeros((f,), dtype)
    p["enc_pos_w"] = nn.glorot(rng, (4, f), dtype)
    p.update(nn.init_layer_norm(f, "enc_ln", dtype))
    p.update(nn.init_mlp2(rng, f, f, f, "enc_mlp", dtype))

    p["init_mu"] = rng.uniform(-1, 1, size=(d,)).astype(dtype)
    p["init_scale"] = nn.zeros((d,), dtype)
    p.update(nn.init_mlp2(rng, 4, dims.box_hidden, d, "init_box", dtype))

    p.update(nn.init_layer_norm(f, "corr_ln_in", dtype))
    p["corr_k_w"] = nn.glorot(rng, (f, d), dtype)
    p["corr_v_w"] = nn.glorot(rng, (f, d), dtype)
    p.update(nn.init_layer_norm(d, "corr_ln_s", dtype))
    p["corr_q_w"] = nn.glorot(rng, (d, d), dtype)
    p.update(nn.init_gru(rng, d, "corr_gru", dtype))
    p.update(nn.init_layer_norm(d, "corr_ln_mlp", dtype))
    p.update(nn.init_mlp2(rng, d, dims.slot_mlp_hidden, d, "corr_mlp", dtype))

    hd = dims.decoder_hidden
    p["dec_w1s"] = nn.glorot(rng, (d, hd), dtype)
    p["dec_w1p"] = nn.glorot(rng, (4, hd), dtype)
    p["dec_b1"] = nn.zeros((hd,), dtype)
    p["dec_w2"] = nn.glorot(rng, (hd, hd), dtype)
    p["dec_b2"] = nn.zeros((hd,), dtype)
    p["dec_w3"] = nn.glorot(rng, (hd, 4), dtype)
    p["dec_b3"] = nn.zeros((4,), dtype)
    return p


def border_grid(gh: int, gw: int, dtype=np.float32) -> np.ndarray:
    """(gh*gw, 4) distances of each cell center to the four borders."""
    ys = (np.arange(gh) + 0.5) / gh
    xs = (np.arange(gw) + 0.5) / gw
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    g = np.stack([cy, cx, 1.0 - cy, 1.0 - cx], axis=-1)
    return g.reshape(gh * gw, 4).astype(dtype)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., L, patch*patch*3) row-major over the patch grid."""
    h, w = frames.shape[-3], frames.shape[-2]
    if h % patch or w % patch:
        raise ConfigurationError(
            f"encode_frame: frame {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    lead = frames.shape[:-3]
    x = frames.reshape(*lead, gh, patch, gw, patch, 3)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, 3)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, patch * patch * 3)


def encode_patches(patches: Tensor, grid: np.ndarray,
                   params: Dict[str, Tensor]) -> Tensor:
    x = T.add(T.matmul(patches, params["enc_patch_w"]), params["enc_patch_b"])
    pos = T.matmul(Tensor(grid.astype(np.asarray(patches.data).dtype)),
                   params["enc_pos_w"])
    x = T.add(x, pos)
    x = nn.layer_norm(x, params, "enc_ln")
    return nn.mlp2(x, params, "enc_mlp")


def encode_frame(frame: np.ndarray, params: Dict[str, Tensor],
                 dims: PerceptionDims) -> FeatureMap:
    """Encode one (H, W, 3) frame (or a stack with leading axes)."""
    frame = np.asarray(frame)
    patches = patchify(frame, dims.patch)
    gh = frame.shape[-3] // dims.patch
    gw = frame.shape[-2] // dims.patch
    grid = border_grid(gh, gw)
    dtype = params["enc_patch_w"].dtype
    feats = encode_patches(Tensor(patches.astype(dtype)), grid, params)
    return FeatureMap(features=feats, grid=grid)


def init_slots(mode: str, n: int, d: int, seed: int, params: Dict[str, Tensor],
               hints: Optional[Hints] = None, leading: Tuple[int, ...] = ()) -> SlotSet:
    """Initial slots: gaussian draws, or box-MLP outputs for hinted slots.

    Hinted boxes fill slots 0..K-1 (rows with valid=False fall back to
    the gaussian path); remaining slots always come from the gaussian
    path. Draws are deterministic in `seed`.
    """
    if mode == HINTS and hints is None:
        raise ContractViolation("init_slots: hints mode requires hints")
    if mode == GAUSSIAN and hints is not None:
        raise ContractViolation("init_slots: gaussian mode takes no hints")
    if mode not in (GAUSSIAN, HINTS):
        raise ConfigurationError(f"init_slots: unknown mode '{mode}'")
    dtype = params["init_mu"].dtype
    rng = np.random.default_rng(seed)
    eps = Tensor(rng.standard_normal((*leading, n, d)).astype(dtype))
    scale = T.broadcast_to(T.softplus(params["init_scale"]), (n, d))
    if leading:
        scale = T.broadcast_to(scale, (*leading, n, d))
    gauss = T.add(T.mul(scale, eps), params["init_mu"])
    if mode == GAUSSIAN:
        return SlotSet(gauss, 0)

    boxes = hints.boxes
    k = boxes.shape[-2]
    if k > n:
        raise ContractViolation(f"init_slots: {k} boxes exceed {n} slots")
    pad = np.zeros((*boxes.shape[:-2], n, 4), dtype=dtype)
    pad[..., :k, :] = boxes
    mask = np.zeros((*boxes.shape[:-2], n, 1), dtype=dtype)
    mask[..., :k, 0] = hints.valid.astype(dtype)
    if leading and boxes.ndim == 2:
        pad = np.broadcast_to(pad, (*leading, n, 4)).copy()
        mask = np.broadcast_to(mask, (*leading, n, 1)).copy()
    cond = nn.mlp2(Tensor(pad), params, "init_box")
    m = T.broadcast_to(Tensor(mask), cond.shape)
    inv = T.add(T.mul(m, -1.0), 1.0)
    return SlotSet(T.add(T.mul(m, cond), T.mul(inv, gauss)), 0)


def correct(slots: SlotSet, fm: FeatureMap, params: Dict[str, Tensor],
            iterations: int = 1) -> SlotSet:
    """Slot-attention corrector: update slots from frame features."""
    if iterations < 1:
        raise ContractViolation(f"correct: iterations {iterations} must be >= 1")
    s = slots.slots if isinstance(slots, SlotSet) else slots
    d = s.shape[-1]
    feats = nn.layer_norm(fm.features, params, "corr_ln_in")
    keys = T.matmul(feats, params["corr_k_w"])      # (..., L, D)
    vals = T.matmul(feats, params["corr_v_w"])
    scale = 1.0 / np.sqrt(d)
    for _ in range(iterations):
        q = T.matmul(nn.layer_norm(s, params, "corr_ln_s"), params["corr_q_w"])
        scores = T.mul(T.matmul(q, T.swapaxes(keys, -1, -2)), scale)  # (..., N, L)
        attn = T.softmax(scores, axis=-2)  # normalized over slots per location
        den = T.maximum(T.sum_(attn, axis=-1, keepdims=True), ATTN_EPS)
        weights = T.div(attn, den)
        upd = T.matmul(weights, vals)  # (..., N, D) weighted mean over locations
        s = nn.gru_cell(upd, s, params, "corr_gru")
        s = T.add(s, nn.mlp2(nn.layer_norm(s, params, "corr_ln_mlp"), params,
                             "corr_mlp"))
    ts = slots.timestep if isinstance(slots, SlotSet) else 0
    return SlotSet(s, ts)


def slot_attention_weights(slots: SlotSet, fm: FeatureMap,
                           params: Dict[str, Tensor]) -> np.ndarray:
    """The (..., N, L) attention matrix of one corrector iteration (diagnostic)."""
    s = slots.slots if isinstance(slots, SlotSet) else slots
    d = s.shape[-1]
    with T.no_grad():
        feats = nn.layer_norm(fm.features, params, "corr_ln_in")
        keys = T.matmul(feats, params["corr_k_w"])
        q = T.matmul(nn.layer_norm(s, params, "corr_ln_s"), params["corr_q_w"])
        scores = T.mul(T.matmul(q, T.swapaxes(keys, -1, -2)), 1.0 / np.sqrt(d))
        return T.softmax(scores, axis=-2).data


def decode_and_compose(slots: SlotSet, params: Dict[str, Tensor],
                       frame_hw: Tuple[int, int]):
    """Spatial-broadcast decode: (frame_hat, alpha, mask).

    frame_hat: (..., H, W, 3); alpha: (..., N, H, W) summing to 1 over
    slots at every pixel; mask: (..., H, W) int argmax with ties going
    to the lowest slot index.
    """
    s = slots.slots if isinstance(slots, SlotSet) else slots
    h, w = frame_hw
    hw = h * w
    lead = s.shape[:-2]
    n, d = s.shape[-2], s.shape[-1]
    dtype = s.dtype
    pos = Tensor(border_grid(h, w, dtype=dtype))
    h1p = T.add(T.matmul(pos, params["dec_w1p"]), params["dec_b1"])  # (HW, Hd)
    h1s = T.matmul(s, params["dec_w1s"])                             # (..., N, Hd)
    hd = h1s.shape[-1]
    h1s = T.reshape(h1s, (*lead, n, 1, hd))
    h1 = T.relu(T.add(T.broadcast_to(h1s, (*lead, n, hw, hd)), h1p))
    h2 = T.relu(T.add(T.matmul(h1, params["dec_w2"]), params["dec_b2"]))
    out = T.add(T.matmul(h2, params["dec_w3"]), params["dec_b3"])    # (..., N, HW, 4)
    rgb = out[..., 0:3]
    alpha_logit = out[..., 3:4]
    alpha = T.softmax(alpha_logit, axis=-3)  # over slots
    frame = T.sum_(T.mul(rgb, alpha), axis=-3)  # (..., HW, 3)
    frame_hat = T.reshape(frame, (*lead, h, w, 3))
    alpha_img = T.reshape(alpha, (*lead, n, h, w))
    mask = np.argmax(alpha_img.data, axis=-3).astype(np.int32)
    return frame_hat, alpha_img, mask
