"""FIFO slot memory and its history views.

The buffer stores corrected slot sets oldest-first; pushing past a
finite capacity evicts the oldest entry. The two view topologies feed
the predictor's temporal attention: CS exposes one slot's timeline,
AS exposes every slot of every step, flattened oldest-first.

Slot tensors are (N, D) in the contracts; any leading batch axes are
carried through untouched (views slice the last-two slot/feature axes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

from statm.errors import ContractViolation
from statm.tensor import Tensor

CS = "cs"
AS = "as"


@dataclass(frozen=True)
class SlotSet:
    """N slot vectors of dimension D at one timestep; slots: (..., N, D)."""

    slots: Tensor
    timestep: int

    @property
    def n(self) -> int:
        return self.slots.shape[-2]

    @property
    def d(self) -> int:
        return self.slots.shape[-1]


class MemoryBuffer:
    """Ordered slot-set queue, oldest first, with optional capacity."""

    def __init__(self, capacity: Optional[int] = None,
                 entries: Sequence[SlotSet] = ()):
        if capacity is not None and capacity < 1:
            raise ContractViolation(f"MemoryBuffer: capacity {capacity} must be >= 1")
        self.capacity = capacity
        self.entries: List[SlotSet] = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def newest(self) -> SlotSet:
        if not self.entries:
            raise ContractViolation("MemoryBuffer: empty buffer has no newest entry")
        return self.entries[-1]

    def drop_newest(self) -> "MemoryBuffer":
        return MemoryBuffer(self.capacity, self.entries[:-1])


def push(buf: MemoryBuffer, s: SlotSet) -> MemoryBuffer:
    """Append a slot set; evicts the oldest entry past capacity."""
    if buf.entries:
        last = buf.entries[-1]
        if s.timestep <= last.timestep:
            raise ContractViolation(
                f"push: timestep {s.timestep} not after {last.timestep}")
        if s.n != last.n or s.d != last.d:
            raise ContractViolation(
                f"push: slot shape ({s.n}, {s.d}) does not match buffered "
                f"({last.n}, {last.d})")
    entries = buf.entries + [s]
    if buf.capacity is not None and len(entries) > buf.capacity:
        entries = entries[len(entries) - buf.capacity:]
    return MemoryBuffer(buf.capacity, entries)


def history_view(buf: MemoryBuffer, topology: str, slot_index: Optional[int] = None,
                 window: int = 1) -> List[Tensor]:
    """Key vectors for temporal attention, oldest first.

    CS: the last `window` entries' slot `slot_index` vectors.
    AS: all N slots of each of the last `window` entries, flattened
    oldest-first (slot order within a step preserved).
    """
    if not buf.entries:
        raise ContractViolation("history_view: empty buffer")
    if window < 1:
        raise ContractViolation(f"history_view: window {window} must be >= 1")
    if topology == CS:
        if slot_index is None:
            raise ContractViolation("history_view: CS requires slot_index")
    elif topology == AS:
        if slot_index is not None:
            raise ContractViolation("history_view: slot_index is CS-only")
    else:
        raise ContractViolation(f"history_view: unknown topology '{topology}'")

    recent = buf.entries[max(0, len(buf.entries) - window):]
    if topology == CS:
        return [e.slots[..., slot_index, :] for e in recent]
    out: List[Tensor] = []
    for e in recent:
        for j in range(e.n):
            out.append(e.slots[..., j, :])
    return out
