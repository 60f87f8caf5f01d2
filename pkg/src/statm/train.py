"""Training loops, optimizer, rollout, and evaluation.

Perception training runs the perceive-predict cycle per frame: encode,
correct the predictor's slots against the features, push the corrected
slots into the buffer, decode them for the reconstruction loss, then
predict the next frame's slots from the buffer. Gradients flow through
the whole unroll unless detach_between_frames is set.

Predictor-only training freezes a perception checkpoint, extracts
corrected slots for every frame, and teacher-forces next-slot
prediction with an L2 slot loss plus an L2 decoded-image loss.

Everything is deterministic given the RunConfig seed; separate RNG
streams drive parameter init, batch sampling, and slot-noise draws so
evaluation never perturbs the training sequence.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from statm import metrics as MT
from statm import nn
from statm import perception as P
from statm import statm as SM
from statm import tensor as T
from statm.container import load_container, save_container
from statm.datagen import VideoSample
from statm.errors import ConfigurationError, ContractViolation
from statm.memory import MemoryBuffer, SlotSet, push
from statm.perception import FeatureMap, PerceptionDims
from statm.statm import StatmConfig
from statm.tensor import Tensor

STATM_KIND = "statm"
BASELINE_KIND = "baseline"
RGB = "rgb"
FLOW = "flow"

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class RunConfig:
    statm: StatmConfig = field(default_factory=StatmConfig)
    dims: PerceptionDims = field(default_factory=PerceptionDims)
    predictor_kind: str = STATM_KIND
    target: str = FLOW
    conditioning: str = P.HINTS
    slot_count: int = 4
    steps: int = 3000
    batch: int = 4
    peak_lr: float = 1e-3
    warmup_steps: int = 75
    seed: int = 0
    train_buffer_capacity: int = 6
    eval_window: int = 24
    frames_per_sample: int = 6
    flow_scale: float = 8.0
    corrector_iterations: int = 1
    eval_interval: int = 500
    eval_videos: int = 8
    detach_between_frames: bool = False
    also_decode_predictions: bool = False

    def __post_init__(self):
        if self.predictor_kind not in (STATM_KIND, BASELINE_KIND):
            raise ConfigurationError(
                f"predictor_kind must be '{STATM_KIND}' or '{BASELINE_KIND}'")
        if self.target not in (RGB, FLOW):
            raise ConfigurationError(f"target must be '{RGB}' or '{FLOW}'")
        if self.conditioning not in (P.HINTS, P.GAUSSIAN):
            raise ConfigurationError(
                f"conditioning must be '{P.HINTS}' or '{P.GAUSSIAN}'")
        if not (0 <= self.warmup_steps < self.steps):
            raise ConfigurationError(
                f"warmup_steps {self.warmup_steps} must be < steps {self.steps}")
        if self.slot_count < 1:
            raise ConfigurationError("slot_count must be >= 1")
        if self.batch < 1 or self.frames_per_sample < 1:
            raise ConfigurationError("batch and frames_per_sample must be >= 1")
        if self.train_buffer_capacity < 1 or self.eval_window < 1:
            raise ConfigurationError("buffer capacity and eval window must be >= 1")
        if self.flow_scale <= 0:
            raise ConfigurationError("flow_scale must be positive")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]  # "perc/..." and "pred/..." arrays
    config: RunConfig
    step: int


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_schedule(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warmup to peak, then cosine decay to zero at `total`."""
    if not (0 <= step <= total):
        raise ConfigurationError(f"lr_schedule: step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    frac = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_init(params: Dict[str, np.ndarray]) -> Dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: Dict, lr: float) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Bias-corrected Adam update; params and grads align by name."""
    state["t"] += 1
    t = state["t"]
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractViolation(
                f"adam_step: grad shape {g.shape} vs param {p.shape} for '{k}'")
        m = state["m"][k]
        v = state["v"][k]
        m *= ADAM_B1
        m += (1 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1 - ADAM_B2) * g * g
        mh = m / (1 - ADAM_B1 ** t)
        vh = v / (1 - ADAM_B2 ** t)
        p -= (lr * mh / (np.sqrt(vh) + ADAM_EPS)).astype(p.dtype)
    return params, state


def perception_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ConfigurationError(
            f"perception_loss: shapes {pred.shape} vs {target.shape}")
    diff = T.add(pred, T.mul(target, -1.0))
    return T.mean_(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# data plumbing


def build_targets(video: VideoSample, cfg: RunConfig) -> np.ndarray:
    """(T, H, W, 3) regression target: frames, or flow mapped into [0,1]."""
    if cfg.target == RGB:
        return video.frames.astype(np.float32)
    f = video.flow.astype(np.float32) / cfg.flow_scale + 0.5
    third = np.full(f.shape[:-1] + (1,), 0.5, dtype=np.float32)
    return np.clip(np.concatenate([f, third], axis=-1), 0.0, 1.0)


def _gather_batch(videos: Sequence[VideoSample], idx: np.ndarray, cfg: RunConfig):
    fps = cfg.frames_per_sample
    frames = np.stack([videos[i].frames[:fps] for i in idx])
    targets = np.stack([build_targets(videos[i], cfg)[:fps] for i in idx])
    n = cfg.slot_count
    boxes = np.zeros((len(idx), n, 4), dtype=np.float32)
    valid = np.zeros((len(idx), n), dtype=bool)
    for row, i in enumerate(idx):
        k = min(videos[i].boxes.shape[0], n)
        boxes[row, :k] = videos[i].boxes[:k]
        valid[row, :k] = videos[i].box_valid[:k].astype(bool)
    return frames, targets, boxes, valid


def _init_slots_for(cfg: RunConfig, pparams, boxes, valid, seed: int,
                    leading: Tuple[int, ...]) -> SlotSet:
    n, d = cfg.slot_count, cfg.dims.slot_dim
    if cfg.conditioning == P.HINTS:
        hints = P.Hints(boxes, valid)
        return P.init_slots(P.HINTS, n, d, seed, pparams, hints, leading=leading)
    return P.init_slots(P.GAUSSIAN, n, d, seed, pparams, leading=leading)


def _predictor(cfg: RunConfig, dparams, slot_set: SlotSet, buf: MemoryBuffer,
               window: int) -> SlotSet:
    if cfg.predictor_kind == BASELINE_KIND:
        return SM.baseline_predict(slot_set, dparams, heads=cfg.statm.heads)
    pred_cfg = replace(cfg.statm, window=window)
    return SM.statm_predict(slot_set, buf, pred_cfg, dparams)


# ---------------------------------------------------------------------------
# the perceive-predict unroll


def unroll(pparams: Dict[str, Tensor], dparams: Dict[str, Tensor], cfg: RunConfig,
           frames: np.ndarray, targets: Optional[np.ndarray], boxes, valid,
           seed: int, capacity: Optional[int], window: int,
           collect: bool = False):
    """Run the correct-push-decode-predict cycle over a frame sequence.

    frames: (..., T, H, W, 3). Returns (loss Tensor or None, outputs dict).
    With collect=True the per-frame decoded frames, alpha maps, masks,
    and corrected slots are returned as NumPy arrays stacked over time.
    """
    lead = frames.shape[:-4]
    t_total = frames.shape[-4]
    hw = frames.shape[-3]
    grid = P.border_grid(hw // cfg.dims.patch, hw // cfg.dims.patch)
    dtype = pparams["enc_patch_w"].dtype
    buf = MemoryBuffer(capacity=capacity)
    slots_in = _init_slots_for(cfg, pparams, boxes, valid, seed, lead).slots
    losses = []
    out = {"masks": [], "frames": [], "alpha": [], "slots": []}
    for t in range(t_total):
        patches = Tensor(P.patchify(frames[..., t, :, :, :], cfg.dims.patch)
                         .astype(dtype))
        fm = FeatureMap(P.encode_patches(patches, grid, pparams), grid)
        corrected = P.correct(SlotSet(slots_in, t), fm, pparams,
                              cfg.corrector_iterations)
        buf = push(buf, SlotSet(corrected.slots, t))
        frame_hat, alpha, mask = P.decode_and_compose(corrected, pparams, (hw, hw))
        if targets is not None:
            losses.append(perception_loss(
                frame_hat, Tensor(targets[..., t, :, :, :].astype(dtype))))
        if collect:
            out["masks"].append(mask)
            out["frames"].append(frame_hat.data)
            out["alpha"].append(alpha.data)
            out["slots"].append(corrected.slots.data)
        if t < t_total - 1:
            nxt = _predictor(cfg, dparams, SlotSet(corrected.slots, t), buf, window)
            slots_in = nxt.slots.detach() if cfg.detach_between_frames else nxt.slots
    loss = None
    if losses:
        loss = T.mul(losses[0], 1.0 / len(losses))
        for l in losses[1:]:
            loss = T.add(loss, T.mul(l, 1.0 / len(losses)))
    if collect:
        axis = len(lead)
        out = {k: np.stack(v, axis=axis) for k, v in out.items()}
        out["buffer"] = buf
    return loss, out


# ---------------------------------------------------------------------------
# parameter bookkeeping


def init_run_params(cfg: RunConfig):
    """(perception tensors, predictor tensors) freshly initialized."""
    rng = np.random.default_rng(cfg.seed)
    perc = P.init_perception_params(rng, cfg.dims)
    if cfg.conditioning == P.GAUSSIAN:
        perc = {k: v for k, v in perc.items() if not k.startswith("init_box")}
    if cfg.predictor_kind == BASELINE_KIND:
        pred = SM.init_baseline_params(rng, cfg.dims.slot_dim, heads=cfg.statm.heads,
                                       key_dim=cfg.statm.key_dim,
                                       mlp_hidden=cfg.statm.mlp_hidden)
    else:
        pred = SM.init_statm_params(rng, cfg.dims.slot_dim, cfg.statm)
    return nn.make_trainable(perc), nn.make_trainable(pred)


def merge_params(pparams, dparams) -> Dict[str, np.ndarray]:
    out = {f"perc/{k}": np.array(v.data) for k, v in pparams.items()}
    out.update({f"pred/{k}": np.array(v.data) for k, v in dparams.items()})
    return out


def split_params(flat: Dict[str, np.ndarray], trainable: bool = True):
    perc, pred = {}, {}
    for k, v in flat.items():
        t = Tensor(v, requires_grad=trainable)
        if k.startswith("perc/"):
            perc[k[5:]] = t
        elif k.startswith("pred/"):
            pred[k[5:]] = t
    return perc, pred


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = {f"param/{k}": v for k, v in ckpt.params.items()}
    cfg_json = json.dumps(run_config_to_dict(ckpt.config), sort_keys=True)
    entries["config"] = np.frombuffer(cfg_json.encode("utf-8"), dtype=np.uint8)
    entries["step"] = np.array(ckpt.step, dtype=np.int32)
    save_container(path, entries)


def load_checkpoint(path) -> Checkpoint:
    entries = load_container(path)
    if "config" not in entries or "step" not in entries:
        raise ConfigurationError(f"{path}: not a checkpoint container")
    cfg = run_config_from_dict(json.loads(bytes(entries["config"]).decode("utf-8")))
    params = {k[6:]: v for k, v in entries.items() if k.startswith("param/")}
    return Checkpoint(params, cfg, int(entries["step"]))


def run_config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def run_config_from_dict(data: dict) -> RunConfig:
    from statm.configio import dataclass_from_dict

    return dataclass_from_dict(RunConfig, data, "run config")


# ---------------------------------------------------------------------------
# training: perception


def _collect_grads(named: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    out = {}
    for k, t in named.items():
        if t.grad is not None:
            out[k] = t.grad
    return out


def train_perception(cfg: RunConfig, videos: Sequence[VideoSample],
                     log_path=None, verbose: bool = False):
    """Joint training of perception and predictor; returns (Checkpoint, log).

    The last cfg.eval_videos videos are held out as the in-training eval
    split; the rest are sampled for batches. Log rows are
    (step, loss, fg_ari, miou, lr) at every eval interval and at the end.
    """
    if len(videos) < cfg.eval_videos + 1:
        raise ConfigurationError(
            f"need more than eval_videos={cfg.eval_videos} videos, got {len(videos)}")
    for v in videos:
        if v.frames.shape[0] < cfg.frames_per_sample:
            raise ConfigurationError(
                f"video has {v.frames.shape[0]} frames < frames_per_sample "
                f"{cfg.frames_per_sample}")
        if v.boxes.shape[0] > cfg.slot_count - 1:
            raise ConfigurationError(
                f"{v.boxes.shape[0]} objects exceed slot budget "
                f"{cfg.slot_count} - 1")
    train_videos = videos[:len(videos) - cfg.eval_videos]
    eval_videos = videos[len(videos) - cfg.eval_videos:]

    pparams, dparams = init_run_params(cfg)
    flat = merge_params(pparams, dparams)
    state = adam_init(flat)
    data_rng = np.random.default_rng(cfg.seed + 1)
    log: List[dict] = []

    def named_tensors():
        out = {f"perc/{k}": v for k, v in pparams.items()}
        out.update({f"pred/{k}": v for k, v in dparams.items()})
        return out

    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(train_videos), size=cfg.batch)
        frames, targets, boxes, valid = _gather_batch(train_videos, idx, cfg)
        seed = cfg.seed * 1_000_003 + step
        loss, _ = unroll(pparams, dparams, cfg, frames, targets, boxes, valid,
                         seed, cfg.train_buffer_capacity,
                         cfg.train_buffer_capacity)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise ContractViolation(f"non-finite loss at step {step}")
        T.backward(loss)
        named = named_tensors()
        grads = _collect_grads(named)
        lr = lr_schedule(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr)
        adam_step(flat, grads, state, lr)
        for k, t in named.items():
            t.data = flat[k]
            t.grad = None
        if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
            ev = evaluate_videos(pparams, dparams, cfg, eval_videos,
                                 window=cfg.eval_window, offset=0)
            row = {"step": step, "loss": loss_val, "fg_ari": ev["fg_ari"],
                   "miou": ev["miou"], "lr": lr}
            log.append(row)
            if verbose:
                print(f"step {step} loss {loss_val:.5f} fg_ari {ev['fg_ari']:.3f} "
                      f"miou {ev['miou']:.3f} lr {lr:.2e}", flush=True)
    ckpt = Checkpoint(merge_params(pparams, dparams), cfg, cfg.steps)
    if log_path is not None:
        write_metric_log(log_path, log, ["step", "loss", "fg_ari", "miou", "lr"])
    return ckpt, log


def write_metric_log(path, rows: List[dict], columns: List[str]) -> None:
    lines = [",".join(columns)]
    for r in rows:
        vals = []
        for c in columns:
            v = r[c]
            vals.append(f"{v:.8g}" if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# evaluation


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("STATM_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_videos(pparams, dparams, cfg: RunConfig, videos, window: int,
                    offset: int = 0) -> Dict[str, float]:
    """Mean FG-ARI / mIoU / PSNR / SSIM over videos (NaNs excluded)."""

    def one(args):
        vid, video = args
        frames = video.frames
        targets = build_targets(video, cfg)
        n = cfg.slot_count
        boxes = np.zeros((n, 4), dtype=np.float32)
        valid = np.zeros((n,), dtype=bool)
        k = min(video.boxes.shape[0], n)
        boxes[:k] = video.boxes[:k]
        valid[:k] = video.box_valid[:k].astype(bool)
        with T.no_grad():
            _, out = unroll(pparams, dparams, cfg, frames, None, boxes, valid,
                            cfg.seed * 911 + vid, None, window, collect=True)
        pred_masks = out["masks"][offset:]
        truth = video.masks[offset:]
        rec = np.clip(out["frames"][offset:], 0.0, 1.0)
        tgt = targets[offset:]
        return (MT.ari(pred_masks, truth, foreground_only=True),
                MT.miou(pred_masks, truth),
                MT.psnr(rec, tgt), MT.ssim(rec, tgt))

    jobs = list(enumerate(videos))
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    arr = np.array(results, dtype=np.float64)
    agg = {}
    for i, name in enumerate(("fg_ari", "miou", "psnr", "ssim")):
        col = arr[:, i]
        col = col[~np.isnan(col)]
        agg[name] = float(col.mean()) if col.size else float("nan")
    return agg


def evaluate_checkpoint(ckpt: Checkpoint, videos, window: Optional[int] = None,
                        offset: int = 0) -> Dict[str, float]:
    pparams, dparams = split_params(ckpt.params, trainable=False)
    w = ckpt.config.eval_window if window is None else window
    return evaluate_videos(pparams, dparams, ckpt.config, videos, w, offset)


# ---------------------------------------------------------------------------
# rollout


def rollout(ckpt: Checkpoint, video: VideoSample, context: int, horizon: int):
    """Perceive `context` frames, then predict `horizon` steps autoregressively.

    Returns a dict with context masks plus per-step predicted slots,
    decoded frames, alpha maps, and masks (exactly `horizon` entries).
    """
    if context < 1:
        raise ContractViolation(f"rollout: context {context} must be >= 1")
    if horizon < 0:
        raise ContractViolation(f"rollout: horizon {horizon} must be >= 0")
    if video.frames.shape[0] < context:
        raise ContractViolation(
            f"rollout: video has {video.frames.shape[0]} frames < context {context}")
    cfg = ckpt.config
    pparams, dparams = split_params(ckpt.params, trainable=False)
    n = cfg.slot_count
    boxes = np.zeros((n, 4), dtype=np.float32)
    valid = np.zeros((n,), dtype=bool)
    k = min(video.boxes.shape[0], n)
    boxes[:k] = video.boxes[:k]
    valid[:k] = video.box_valid[:k].astype(bool)
    hw = video.frames.shape[-2]
    with T.no_grad():
        _, out = unroll(pparams, dparams, cfg, video.frames[:context], None,
                        boxes, valid, cfg.seed * 911, None, cfg.eval_window,
                        collect=True)
        buf = out["buffer"]
        slots = SlotSet(Tensor(out["slots"][context - 1]), context - 1)
        pred = {"slots": [], "frames": [], "alpha": [], "masks": []}
        for h in range(horizon):
            nxt = _predictor(cfg, dparams, slots, buf, cfg.eval_window)
            buf = push(buf, nxt)
            frame_hat, alpha, mask = P.decode_and_compose(nxt, pparams, (hw, hw))
            pred["slots"].append(nxt.slots.data)
            pred["frames"].append(frame_hat.data)
            pred["alpha"].append(alpha.data)
            pred["masks"].append(mask)
            slots = nxt
    result = {"context_masks": out["masks"], "context_frames": out["frames"]}
    for key, seq in pred.items():
        shape = {
            "slots": (0, n, cfg.dims.slot_dim),
            "frames": (0, hw, hw, 3),
            "alpha": (0, n, hw, hw),
            "masks": (0, hw, hw),
        }[key]
        result["pred_" + key] = (np.stack(seq) if seq
                                 else np.zeros(shape, dtype=np.float32))
    result["pred_masks"] = result["pred_masks"].astype(np.int32)
    return result


# ---------------------------------------------------------------------------
# training: predictor on frozen slots


def extract_slot_dataset(ckpt: Checkpoint, videos: Sequence[VideoSample]):
    """Frozen per-frame corrected slots (+ frames) from a perception model."""
    cfg = ckpt.config
    pparams, dparams = split_params(ckpt.params, trainable=False)
    ds = []
    for vid, video in enumerate(videos):
        n = cfg.slot_count
        boxes = np.zeros((n, 4), dtype=np.float32)
        valid = np.zeros((n,), dtype=bool)
        k = min(video.boxes.shape[0], n)
        boxes[:k] = video.boxes[:k]
        valid[:k] = video.box_valid[:k].astype(bool)
        with T.no_grad():
            _, out = unroll(pparams, dparams, cfg, video.frames, None, boxes,
                            valid, cfg.seed * 911 + vid, None, cfg.eval_window,
                            collect=True)
        ds.append({"slots": out["slots"], "frames": video.frames,
                   "targets": build_targets(video, cfg)})
    return ds


def train_predictor(cfg: RunConfig, ckpt: Checkpoint, videos, log_path=None,
                    verbose: bool = False):
    """Teacher-forced next-slot training on frozen corrected slots.

    Loss = MSE(predicted slots, next corrected slots)
         + MSE(decode(predicted slots), next target frame), equally
    weighted. Only the predictor parameters receive updates; the log
    carries the loss decomposition and the copy-predictor lower bound.
    """
    ds = extract_slot_dataset(ckpt, videos)
    t_total = min(d["slots"].shape[0] for d in ds)
    if t_total < 2:
        raise ContractViolation(
            f"train_predictor: need >= 2 frames of slots, got {t_total}")
    pparams, _ = split_params(ckpt.params, trainable=False)  # frozen decoder
    rng = np.random.default_rng(cfg.seed)
    if cfg.predictor_kind == BASELINE_KIND:
        dinit = SM.init_baseline_params(rng, cfg.dims.slot_dim, heads=cfg.statm.heads,
                                        key_dim=cfg.statm.key_dim,
                                        mlp_hidden=cfg.statm.mlp_hidden)
    else:
        dinit = SM.init_statm_params(rng, cfg.dims.slot_dim, cfg.statm)
    dparams = nn.make_trainable(dinit)
    flat = {k: np.array(v.data) for k, v in dparams.items()}
    state = adam_init(flat)
    data_rng = np.random.default_rng(cfg.seed + 1)
    hw = ds[0]["frames"].shape[-2]
    log: List[dict] = []
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(ds), size=cfg.batch)
        slots_np = np.stack([ds[i]["slots"][:t_total] for i in idx])  # (B,T,N,D)
        targets_np = np.stack([ds[i]["targets"][:t_total] for i in idx])
        buf = MemoryBuffer(capacity=cfg.train_buffer_capacity)
        slot_losses, img_losses = [], []
        copy_losses = []
        for t in range(t_total - 1):
            cur = SlotSet(Tensor(slots_np[:, t]), t)
            buf = push(buf, cur)
            pred = _predictor(cfg, dparams, cur, buf, cfg.train_buffer_capacity)
            nxt = Tensor(slots_np[:, t + 1])
            slot_losses.append(perception_loss(pred.slots, nxt))
            frame_hat, _, _ = P.decode_and_compose(pred, pparams, (hw, hw))
            img_losses.append(perception_loss(
                frame_hat, Tensor(targets_np[:, t + 1])))
            copy_losses.append(float(
                np.mean((slots_np[:, t] - slots_np[:, t + 1]) ** 2)))
        k = 1.0 / len(slot_losses)
        slot_loss = slot_losses[0] if len(slot_losses) == 1 else None
        img_loss = img_losses[0] if len(img_losses) == 1 else None
        if slot_loss is None:
            slot_loss = T.mul(slot_losses[0], k)
            img_loss = T.mul(img_losses[0], k)
            for a, b in zip(slot_losses[1:], img_losses[1:]):
                slot_loss = T.add(slot_loss, T.mul(a, k))
                img_loss = T.add(img_loss, T.mul(b, k))
        loss = T.add(slot_loss, img_loss)
        lv, sv, iv = float(loss.data), float(slot_loss.data), float(img_loss.data)
        if not math.isfinite(lv):
            raise ContractViolation(f"non-finite loss at step {step}")
        T.backward(loss)
        grads = _collect_grads(dparams)
        lr = lr_schedule(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr)
        adam_step(flat, grads, state, lr)
        for k2, t2 in dparams.items():
            t2.data = flat[k2]
            t2.grad = None
        if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
            row = {"step": step, "loss": lv, "slot_loss": sv, "image_loss": iv,
                   "copy_loss": float(np.mean(copy_losses)), "lr": lr}
            log.append(row)
            if verbose:
                print(f"step {step} loss {lv:.5f} slot {sv:.5f} image {iv:.5f} "
                      f"copy {row['copy_loss']:.5f}", flush=True)
    params = {f"perc/{k2}": np.array(v.data) for k2, v in pparams.items()}
    params.update({f"pred/{k2}": v for k2, v in flat.items()})
    out_ckpt = Checkpoint(params, cfg, cfg.steps)
    if log_path is not None:
        write_metric_log(log_path, log,
                         ["step", "loss", "slot_loss", "image_loss",
                          "copy_loss", "lr"])
    return out_ckpt, log
