"""The slot-based time-space transformer predictor and its cost accounting.

Temporal cross-attention reads the memory buffer under one of two key
topologies (CS: each slot attends to its own timeline; AS: every slot
attends to all buffered slots), spatial self-attention mixes the current
slots, and the two streams combine under one of three fusion modes:

    t+s : CrossAtt(S, M) + SelfAtt(S)
    st  : CrossAtt(SelfAtt(S), M)
    ts  : SelfAtt(CrossAtt(S, M))

The attention core is wrapped in one of two residual blocks: the
post-normalized variant (X = LN(core + S); Y = LN(MLP(X)); X + Y) or
the pre-normalized one, where S and the memory keys pass through a
shared layer norm first and the block returns S_norm + MLP(LN(core +
S_norm)).

Score-evaluation counters can be enabled around any predictor call to
compare the actual number of query-key products with the closed-form
token/pair accounting in ``count_cost``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from statm import nn
from statm import tensor as T
from statm.errors import ConfigurationError, ContractViolation
from statm.memory import AS, CS, MemoryBuffer, SlotSet, push
from statm.tensor import Tensor

TPLUSS = "t+s"
ST = "st"
TS = "ts"
POST = "post"
PRE = "pre"
FULL = "full"

FUSIONS = (TPLUSS, ST, TS)
TOPOLOGIES = (CS, AS)
NORM_VARIANTS = (POST, PRE)


@dataclass
class StatmConfig:
    topology: str = CS
    fusion: str = TPLUSS
    norm_variant: str = POST
    heads: int = 4
    key_dim: int = 64
    mlp_hidden: int = 128
    history_excludes_current: bool = False
    window: int = 6

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigurationError(f"topology must be one of {TOPOLOGIES}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}")
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigurationError(f"norm_variant must be one of {NORM_VARIANTS}")
        if self.key_dim % self.heads != 0:
            raise ConfigurationError(
                f"key_dim {self.key_dim} not divisible by heads {self.heads}")
        if self.window < 1:
            raise ConfigurationError(f"window {self.window} must be >= 1")


@dataclass
class CostReport:
    topology: str
    t: int
    n: int
    tokens: int
    pair_computations: int


def count_cost(topology: str, t: int, n: int) -> CostReport:
    """Token and pairwise-score counts for a prediction over t timesteps.

    t counts the current step plus the t-1 buffered past steps; the
    temporal stream scores each of the n current slots against its t-1
    past keys (CS) or against all n*(t-1) past keys (AS), and the
    spatial stream always costs n^2. The flattened full-attention
    baseline processes all t*n tokens pairwise.
    """
    if t < 1 or n < 1:
        raise ConfigurationError(f"count_cost: t={t}, n={n} must be >= 1")
    if topology == CS:
        return CostReport(CS, t, n, t + n, n * (t - 1) + n * n)
    if topology == AS:
        return CostReport(AS, t, n, t * n, t * n * n)
    if topology == FULL:
        return CostReport(FULL, t, n, t * n, (t * n) ** 2)
    raise ConfigurationError(f"count_cost: unknown topology '{topology}'")


class _ScoreCounter:
    def __init__(self):
        self.enabled = False
        self.pairs = 0

    def add(self, n: int):
        if self.enabled:
            self.pairs += n


_counter = _ScoreCounter()


@contextlib.contextmanager
def count_scores():
    """Enable query-key score counting inside the block; yields the counter."""
    _counter.enabled = True
    _counter.pairs = 0
    try:
        yield _counter
    finally:
        _counter.enabled = False


# ---------------------------------------------------------------------------
# parameters


def init_statm_params(rng: np.random.Generator, d: int, cfg: StatmConfig,
                      dtype=np.float32) -> Dict[str, np.ndarray]:
    p = {}
    p.update(nn.init_attention(rng, d, cfg.key_dim, "t", dtype))
    p.update(nn.init_attention(rng, d, cfg.key_dim, "s", dtype))
    p.update(nn.init_layer_norm(d, "ln1", dtype))
    p.update(nn.init_mlp2(rng, d, cfg.mlp_hidden, d, "mlp", dtype))
    if cfg.norm_variant == POST:
        p.update(nn.init_layer_norm(d, "ln2", dtype))
    else:
        p.update(nn.init_layer_norm(d, "lnp", dtype))
    return p


def init_baseline_params(rng: np.random.Generator, d: int, heads: int = 4,
                         key_dim: int | None = None, mlp_hidden: int | None = None,
                         dtype=np.float32) -> Dict[str, np.ndarray]:
    key_dim = d if key_dim is None else key_dim
    mlp_hidden = 2 * d if mlp_hidden is None else mlp_hidden
    p = {}
    p.update(nn.init_attention(rng, d, key_dim, "s", dtype))
    p.update(nn.init_layer_norm(d, "ln1", dtype))
    p.update(nn.init_mlp2(rng, d, mlp_hidden, d, "mlp", dtype))
    p.update(nn.init_layer_norm(d, "ln2", dtype))
    return p


# ---------------------------------------------------------------------------
# attention streams


def _unwrap(s) -> Tensor:
    return s.slots if isinstance(s, SlotSet) else s


def spatial_self_attention(s, params: Dict[str, Tensor], heads: int = 4) -> Tensor:
    """Self-attention over the N current slots only."""
    slots = _unwrap(s)
    n = slots.shape[-2]
    _counter.add(n * n)
    return nn.multi_head_attention(slots, slots, params, "s", heads)


def _stack_history(entries: List[SlotSet]) -> Tensor:
    """(..., T, N, D) stack of buffer entries, oldest first."""
    parts = []
    for e in entries:
        lead = e.slots.shape[:-2]
        parts.append(T.reshape(e.slots, (*lead, 1, e.n, e.d)))
    return T.concat(parts, axis=-3)


def _temporal_entries(buf: MemoryBuffer, cfg: StatmConfig) -> List[SlotSet]:
    if len(buf) == 0:
        raise ContractViolation("temporal_cross_attention: empty buffer")
    entries = buf.entries
    if cfg.history_excludes_current and len(entries) > 1:
        entries = entries[:-1]
    return entries[max(0, len(entries) - cfg.window):]


def temporal_cross_attention(s, buf: MemoryBuffer, cfg: StatmConfig,
                             params: Dict[str, Tensor]) -> Tensor:
    """Cross-attention from current slots into the buffered history.

    CS: slot i queries only its own timeline (keys never mix slots);
    AS: every slot queries the flattened history of all slots.
    """
    slots = _unwrap(s)
    entries = _temporal_entries(buf, cfg)
    hist = _stack_history(entries)  # (..., T', N, D)
    t_len = hist.shape[-3]
    n, d = slots.shape[-2], slots.shape[-1]
    lead = slots.shape[:-2]
    if cfg.topology == CS:
        keys = T.swapaxes(hist, -3, -2)  # (..., N, T', D)
        q = T.reshape(slots, (*lead, n, 1, d))
        out = nn.multi_head_attention(q, keys, params, "t", cfg.heads)
        _counter.add(n * t_len)
        return T.reshape(out, (*lead, n, d))
    keys = T.reshape(hist, (*lead, t_len * n, d))
    _counter.add(n * t_len * n)
    return nn.multi_head_attention(slots, keys, params, "t", cfg.heads)


def _fusion_core(slots: Tensor, buf: MemoryBuffer, cfg: StatmConfig,
                 params: Dict[str, Tensor]) -> Tensor:
    if cfg.fusion == TPLUSS:
        return T.add(temporal_cross_attention(slots, buf, cfg, params),
                     spatial_self_attention(slots, params, cfg.heads))
    if cfg.fusion == ST:
        mixed = spatial_self_attention(slots, params, cfg.heads)
        return temporal_cross_attention(mixed, buf, cfg, params)
    return spatial_self_attention(
        temporal_cross_attention(slots, buf, cfg, params), params, cfg.heads)


def statm_predict(s: SlotSet, buf: MemoryBuffer, cfg: StatmConfig,
                  params: Dict[str, Tensor]) -> SlotSet:
    """One prediction step: next-step slots from current slots and memory."""
    slots = _unwrap(s)
    if cfg.norm_variant == PRE:
        sn = nn.layer_norm(slots, params, "lnp")
        nbuf = MemoryBuffer(buf.capacity, [
            SlotSet(nn.layer_norm(e.slots, params, "lnp"), e.timestep)
            for e in buf.entries
        ])
        core = _fusion_core(sn, nbuf, cfg, params)
        x = nn.layer_norm(T.add(core, sn), params, "ln1")
        out = T.add(sn, nn.mlp2(x, params, "mlp"))
    else:
        core = _fusion_core(slots, buf, cfg, params)
        x = nn.layer_norm(T.add(core, slots), params, "ln1")
        y = nn.layer_norm(nn.mlp2(x, params, "mlp"), params, "ln2")
        out = T.add(x, y)
    ts = s.timestep + 1 if isinstance(s, SlotSet) else 0
    return SlotSet(out, ts)


def baseline_predict(s: SlotSet, params: Dict[str, Tensor], heads: int = 4) -> SlotSet:
    """Transformer-encoder-block predictor over current slots only (no memory)."""
    slots = _unwrap(s)
    core = spatial_self_attention(slots, params, heads)
    x = nn.layer_norm(T.add(core, slots), params, "ln1")
    y = nn.layer_norm(nn.mlp2(x, params, "mlp"), params, "ln2")
    out = T.add(x, y)
    ts = s.timestep + 1 if isinstance(s, SlotSet) else 0
    return SlotSet(out, ts)


# ---------------------------------------------------------------------------
# flattened full-attention reference (cost comparisons only)


def full_attention_reference(current: np.ndarray, history: List[np.ndarray],
                             seed: int = 0):
    """Plain-NumPy full self-attention over all t*n flattened slot tokens.

    Returns (output for the n current tokens, number of score entries
    actually computed). Used to anchor the (t*n)^2 account; not a
    trainable model.
    """
    tokens = np.concatenate(list(history) + [current], axis=0).astype(np.float64)
    d = tokens.shape[-1]
    rng = np.random.default_rng(seed)
    wq = rng.normal(size=(d, d)) / np.sqrt(d)
    wk = rng.normal(size=(d, d)) / np.sqrt(d)
    wv = rng.normal(size=(d, d)) / np.sqrt(d)
    q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
    scores = (q @ k.T) / np.sqrt(d)
    pairs = scores.size
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = attn @ v
    return out[-current.shape[0]:], pairs


def measured_pairs(topology: str, t: int, n: int, d: int = 8, seed: int = 0) -> int:
    """Run an instrumented prediction over t-1 buffered steps and count scores.

    The buffer holds the t-1 past slot sets; the current set is the
    query (not yet pushed), matching the accounting in ``count_cost``.
    For t == 1 there is no history and only the spatial stream runs.
    """
    rng = np.random.default_rng(seed)
    if topology == FULL:
        current = rng.normal(size=(n, d))
        history = [rng.normal(size=(n, d)) for _ in range(t - 1)]
        _, pairs = full_attention_reference(current, history, seed)
        return pairs
    cfg = StatmConfig(topology=topology, fusion=TPLUSS, norm_variant=POST,
                      heads=1, key_dim=d, mlp_hidden=2 * d, window=t)
    params = nn.make_trainable(init_statm_params(rng, d, cfg))
    cur = SlotSet(Tensor(rng.normal(size=(n, d)).astype(np.float32)), t - 1)
    with T.no_grad(), count_scores() as c:
        if t == 1:
            spatial_self_attention(cur, params, cfg.heads)
        else:
            buf = MemoryBuffer()
            for step in range(t - 1):
                buf = push(buf, SlotSet(
                    Tensor(rng.normal(size=(n, d)).astype(np.float32)), step))
            statm_predict(cur, buf, cfg, params)
    return c.pairs
