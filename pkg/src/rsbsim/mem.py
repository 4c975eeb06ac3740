"""Physical memory and a two-level inclusive cache hierarchy.

The caches are a latency/presence model only: data always lives in
PhysicalMemory, and a cache line is just a tag in a set. LRU order within a
set is list order (most recent first). The LLC is inclusive of L1, enforced
by back-invalidation on LLC eviction.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["PAGE_SIZE", "CacheConfig", "CacheHierarchy", "PhysicalMemory", "access"]

PAGE_SIZE = 4096
WORD = 8
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class CacheConfig:
    line_size: int = 64
    l1_sets: int = 64
    l1_ways: int = 8
    llc_sets: int = 512
    llc_ways: int = 16
    lat_l1: int = 4
    lat_llc: int = 40
    lat_mem: int = 200

    def __post_init__(self):
        for name in ("line_size", "l1_sets", "l1_ways", "llc_sets", "llc_ways"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lat_l1 < self.lat_llc < self.lat_mem:
            raise ValueError("latencies must satisfy lat_l1 < lat_llc < lat_mem")


class PhysicalMemory:
    """Sparse byte-addressable memory in 4096-byte pages.

    Reads of bytes that were never written return 0.
    """

    __slots__ = ("pages",)

    def __init__(self):
        self.pages: dict[int, bytearray] = {}

    def _page(self, idx: int) -> bytearray:
        p = self.pages.get(idx)
        if p is None:
            p = bytearray(PAGE_SIZE)
            self.pages[idx] = p
        return p

    def read_byte(self, addr: int) -> int:
        p = self.pages.get(addr // PAGE_SIZE)
        return p[addr % PAGE_SIZE] if p is not None else 0

    def write_byte(self, addr: int, val: int) -> None:
        self._page(addr // PAGE_SIZE)[addr % PAGE_SIZE] = val & 0xFF

    def read_word(self, addr: int) -> int:
        page, off = divmod(addr, PAGE_SIZE)
        if off <= PAGE_SIZE - WORD:
            p = self.pages.get(page)
            if p is None:
                return 0
            return int.from_bytes(p[off:off + WORD], "little")
        return int.from_bytes(bytes(self.read_byte(addr + i) for i in range(WORD)), "little")

    def write_word(self, addr: int, val: int) -> None:
        val &= _U64
        page, off = divmod(addr, PAGE_SIZE)
        if off <= PAGE_SIZE - WORD:
            self._page(page)[off:off + WORD] = val.to_bytes(WORD, "little")
        else:
            for i, b in enumerate(val.to_bytes(WORD, "little")):
                self.write_byte(addr + i, b)

    def write_blob(self, addr: int, blob: bytes) -> None:
        for i, b in enumerate(blob):
            self.write_byte(addr + i, b)

    def read_blob(self, addr: int, n: int) -> bytes:
        return bytes(self.read_byte(addr + i) for i in range(n))


class CacheHierarchy:
    """L1 + LLC, set-associative, LRU replacement, inclusive."""

    __slots__ = ("cfg", "l1", "llc", "hits_l1", "hits_llc", "misses")

    def __init__(self, cfg: CacheConfig | None = None):
        self.cfg = cfg or CacheConfig()
        self.l1: list[list[int]] = [[] for _ in range(self.cfg.l1_sets)]
        self.llc: list[list[int]] = [[] for _ in range(self.cfg.llc_sets)]
        self.hits_l1 = 0
        self.hits_llc = 0
        self.misses = 0

    # -- internals ---------------------------------------------------------

    def _fill_l1(self, line: int) -> None:
        s = self.l1[line % self.cfg.l1_sets]
        s.insert(0, line)
        if len(s) > self.cfg.l1_ways:
            s.pop()

    def _fill_llc(self, line: int) -> None:
        s = self.llc[line % self.cfg.llc_sets]
        s.insert(0, line)
        if len(s) > self.cfg.llc_ways:
            victim = s.pop()
            # inclusion: a line leaving the LLC may not stay in L1
            l1set = self.l1[victim % self.cfg.l1_sets]
            if victim in l1set:
                l1set.remove(victim)

    # -- public ------------------------------------------------------------

    def access(self, addr: int, is_write: bool = False, speculative: bool = False) -> int:
        """Touch the line holding addr; returns the access latency.

        Cache state is updated the same way for speculative and committed
        accesses (speculative fills are never rolled back). The latency is
        charged for the line of the starting address only.
        """
        line = addr // self.cfg.line_size
        s1 = self.l1[line % self.cfg.l1_sets]
        if line in s1:
            if s1[0] != line:
                s1.remove(line)
                s1.insert(0, line)
            self.hits_l1 += 1
            return self.cfg.lat_l1
        s2 = self.llc[line % self.cfg.llc_sets]
        if line in s2:
            if s2[0] != line:
                s2.remove(line)
                s2.insert(0, line)
            self._fill_l1(line)
            self.hits_llc += 1
            return self.cfg.lat_llc
        self._fill_llc(line)
        self._fill_l1(line)
        self.misses += 1
        return self.cfg.lat_mem

    def clflush(self, addr: int) -> None:
        """Remove the line holding addr from both levels."""
        line = addr // self.cfg.line_size
        s1 = self.l1[line % self.cfg.l1_sets]
        if line in s1:
            s1.remove(line)
        s2 = self.llc[line % self.cfg.llc_sets]
        if line in s2:
            s2.remove(line)

    def present(self, addr: int) -> str | None:
        """'l1', 'llc' or None, without disturbing LRU state."""
        line = addr // self.cfg.line_size
        if line in self.l1[line % self.cfg.l1_sets]:
            return "l1"
        if line in self.llc[line % self.cfg.llc_sets]:
            return "llc"
        return None

    def check_inclusion(self) -> bool:
        """True iff every L1-resident line is also LLC-resident."""
        resident = {line for s in self.llc for line in s}
        return all(line in resident for s in self.l1 for line in s)


def access(h: CacheHierarchy, m: PhysicalMemory, addr: int,
           is_write: bool = False, speculative: bool = False,
           value: int = 0) -> tuple[int, int]:
    """Combined data + latency access.

    Reads return (word at addr, latency). Writes return (value, latency);
    a speculative write charges latency and updates cache state but leaves
    PhysicalMemory untouched (the engine keeps speculative data in its
    store buffer).
    """
    lat = h.access(addr, is_write=is_write, speculative=speculative)
    if is_write:
        if not speculative:
            m.write_word(addr, value)
        return value & _U64, lat
    return m.read_word(addr), lat
