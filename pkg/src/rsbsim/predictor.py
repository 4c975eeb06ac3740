"""Return stack buffer and branch target buffer models.

The RSB is a fixed-size ring of predicted return targets. A call pushes the
address of its successor instruction; a return pops a prediction. Variants
differ only in what happens when more returns than calls have been seen:

  STOP_ON_UNDERFLOW  no prediction once the buffer is empty
  BTB_FALLBACK       an empty buffer defers to the BTB entry for the return
                     site; if the BTB also misses, no prediction (modeling
                     assumption: some hardware would still predict something)
  CYCLIC             the top pointer moves modulo N and a prediction is always
                     served, so pops past empty re-serve stale entries

Pushing into a full buffer always overwrites the oldest entry, in every
variant.
"""

from __future__ import annotations

from enum import Enum

__all__ = ["RsbVariant", "ReturnStackBuffer", "BranchTargetBuffer"]


class RsbVariant(Enum):
    STOP_ON_UNDERFLOW = "stop_on_underflow"
    BTB_FALLBACK = "btb_fallback"
    CYCLIC = "cyclic"

    @classmethod
    def parse(cls, name: str) -> "RsbVariant":
        key = name.strip().lower()
        aliases = {
            "stop": cls.STOP_ON_UNDERFLOW,
            "stop_on_underflow": cls.STOP_ON_UNDERFLOW,
            "btb": cls.BTB_FALLBACK,
            "btb_fallback": cls.BTB_FALLBACK,
            "cyclic": cls.CYCLIC,
        }
        if key not in aliases:
            raise ValueError(f"unknown rsb variant {name!r}")
        return aliases[key]


class BranchTargetBuffer:
    """Direct-mapped BTB: slot = src % size, full-address tag."""

    __slots__ = ("size", "tags", "targets")

    def __init__(self, size: int = 256):
        if size < 1:
            raise ValueError("btb size must be positive")
        self.size = size
        self.tags: list[int] = [-1] * size
        self.targets: list[int] = [0] * size

    def update(self, src: int, target: int) -> None:
        slot = src % self.size
        self.tags[slot] = src
        self.targets[slot] = target

    def lookup(self, src: int) -> int | None:
        slot = src % self.size
        if self.tags[slot] == src:
            return self.targets[slot]
        return None


class ReturnStackBuffer:
    """Per-logical-core return address stack with a ring top pointer.

    `entries` cold-start at code address 0; under CYCLIC an empty buffer
    therefore predicts 0 rather than withholding a prediction.
    """

    __slots__ = ("size", "variant", "entries", "top", "occupancy")

    def __init__(self, size: int = 16, variant: RsbVariant = RsbVariant.CYCLIC):
        if size < 1:
            raise ValueError("rsb size must be positive")
        self.size = size
        self.variant = variant
        self.entries: list[int] = [0] * size
        self.top = size - 1  # slot of the most recent push
        self.occupancy = 0

    def push(self, ret_addr: int) -> None:
        self.top = (self.top + 1) % self.size
        self.entries[self.top] = ret_addr
        if self.occupancy < self.size:
            self.occupancy += 1

    def predict_pop(self, btb: BranchTargetBuffer | None = None,
                    ret_site: int = 0) -> int | None:
        """Prediction for a return at `ret_site`, advancing the stack state.

        The value under the top pointer is read first; the pointer then moves
        down (modulo N).
        """
        if self.occupancy == 0 and self.variant is not RsbVariant.CYCLIC:
            if self.variant is RsbVariant.BTB_FALLBACK and btb is not None:
                return btb.lookup(ret_site)
            return None
        value = self.entries[self.top]
        self.top = (self.top - 1) % self.size
        if self.occupancy > 0:
            self.occupancy -= 1
        return value

    def flush_fill(self, benign_addr: int) -> None:
        """Overwrite every entry with a benign address and mark the buffer
        full, so the next `size` pops all predict `benign_addr`."""
        for i in range(self.size):
            self.entries[i] = benign_addr
        self.top = self.size - 1
        self.occupancy = self.size

    def snapshot(self) -> tuple[int, ...]:
        """Entries from most to least recent push (debugging/trace aid)."""
        return tuple(self.entries[(self.top - i) % self.size] for i in range(self.size))

    def __repr__(self) -> str:
        return (f"ReturnStackBuffer(size={self.size}, variant={self.variant.value}, "
                f"occupancy={self.occupancy}, top={self.top})")
