"""Cache-timing measurement helpers: flush+reload over a page-strided probe
array, prime+probe over a chosen set, threshold calibration, and decoding of
nibble-split probe hits back into bytes.

These helpers act on the cache hierarchy directly and stand in for the
attacker's own measurement code; the cross-process scenario instead carries
a measurer written in the toy ISA, so both flavours exist and agree.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .mem import CacheConfig, CacheHierarchy
from .rng import XorShift64

__all__ = [
    "ProbeArray",
    "SlotReading",
    "MeasurementResult",
    "calibrate_threshold",
    "decode_nibbles",
    "evict_by_walking",
    "prime_set",
    "probe_set",
    "write_csv",
]

PAGE = 4096


def calibrate_threshold(cfg: CacheConfig) -> int:
    """Hit/miss decision latency: halfway between an L1 hit and a miss."""
    return (cfg.lat_l1 + cfg.lat_mem) // 2


@dataclass(frozen=True)
class SlotReading:
    slot: int
    latency: int
    hot: bool


@dataclass(frozen=True)
class MeasurementResult:
    readings: tuple[SlotReading, ...]

    def hot_slots(self) -> list[int]:
        return [r.slot for r in self.readings if r.hot]

    def latency_of(self, slot: int) -> int:
        for r in self.readings:
            if r.slot == slot:
                return r.latency
        raise KeyError(slot)


class ProbeArray:
    """A page-strided array of cache lines, one line per symbol value.

    Page striding keeps every slot in its own set-and-page so a single
    speculative touch maps to exactly one slot.
    """

    def __init__(self, base: int, slots: int, stride: int = PAGE):
        self.base = base
        self.slots = slots
        self.stride = stride

    def addr(self, slot: int) -> int:
        if not 0 <= slot < self.slots:
            raise IndexError(f"slot {slot} out of range 0..{self.slots - 1}")
        return self.base + slot * self.stride

    def flush_all(self, caches: CacheHierarchy) -> None:
        for i in range(self.slots):
            caches.clflush(self.addr(i))

    def reload_and_time(self, caches: CacheHierarchy, threshold: int, *,
                        rng: XorShift64 | None = None,
                        flip_prob: float = 0.0) -> MeasurementResult:
        """Time a load of every slot (in a shuffled order when an rng is
        given) and mark the ones under the threshold.

        flip_prob models unrelated cache activity racing the measurement:
        with that probability per slot, a warmed line was evicted before
        the timed reload (a hit reads as a miss) or a cold one was
        spuriously filled (a miss reads as a hit). The perturbation lands
        on the recorded latency, so verdicts and averages stay coherent.
        """
        order = list(range(self.slots))
        if rng is not None:
            for i in range(self.slots - 1, 0, -1):
                j = rng.below(i + 1)
                order[i], order[j] = order[j], order[i]
        cfg = caches.cfg
        readings = []
        for slot in order:
            lat = caches.access(self.addr(slot))
            if flip_prob > 0.0 and rng is not None and rng.chance(flip_prob):
                lat = cfg.lat_mem if lat < threshold else cfg.lat_l1
            readings.append(SlotReading(slot, lat, lat < threshold))
        readings.sort(key=lambda r: r.slot)
        return MeasurementResult(tuple(readings))


def decode_nibbles(low_hot: list[int], high_hot: list[int]) -> int | None:
    """Combine hits from a low-nibble and a high-nibble probe into a byte.
    Returns None unless each probe saw exactly one hot slot."""
    if len(low_hot) == 1 and len(high_hot) == 1:
        return (high_hot[0] << 4) | low_hot[0]
    return None


def evict_by_walking(caches: CacheHierarchy, target_addr: int,
                     scratch_base: int) -> None:
    """Evict target_addr's line without clflush by touching enough scratch
    lines that map to the same last-level set; inclusion then drops the line
    from L1 as well. The scratch stride keeps the walk inside one set."""
    cfg = caches.cfg
    set_stride = cfg.llc_sets * cfg.line_size
    line = (target_addr // cfg.line_size) * cfg.line_size
    offset = line % set_stride
    for k in range(1, cfg.llc_ways + 1):
        caches.access(scratch_base + k * set_stride + offset)


def prime_set(caches: CacheHierarchy, base: int, set_index: int) -> list[int]:
    """Fill one last-level set with attacker lines; returns the addresses."""
    cfg = caches.cfg
    set_stride = cfg.llc_sets * cfg.line_size
    addrs = [base + set_index * cfg.line_size + k * set_stride
             for k in range(cfg.llc_ways)]
    for a in addrs:
        caches.access(a)
    return addrs


def probe_set(caches: CacheHierarchy, addrs: list[int],
              threshold: int) -> int:
    """Re-access primed lines and count how many were evicted meanwhile."""
    return sum(1 for a in addrs if caches.access(a) >= threshold)


def write_csv(path, trials: list[MeasurementResult]) -> None:
    """Dump measurements as rows of trial,slot,latency,hot."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "slot", "latency", "hot"])
        for t, res in enumerate(trials):
            for r in res.readings:
                w.writerow([t, r.slot, r.latency, int(r.hot)])
