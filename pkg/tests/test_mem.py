"""Sparse memory and the two-level inclusive cache hierarchy, checked
against the timestamp-LRU model in oracles.py."""

import random
import struct

from hypothesis import given, strategies as st

from oracles import CacheModel
from rsbsim.mem import CacheConfig, CacheHierarchy, PhysicalMemory


# --------------------------------------------------------------------------
# physical memory

def test_unwritten_memory_reads_zero():
    mem = PhysicalMemory()
    assert mem.read_byte(0) == 0
    assert mem.read_word(0x123456789) == 0
    assert mem.read_blob(50, 4) == b"\0\0\0\0"


@given(addr=st.integers(0, 1 << 48), value=st.integers(0, (1 << 64) - 1))
def test_word_round_trip_is_little_endian(addr, value):
    mem = PhysicalMemory()
    mem.write_word(addr, value)
    assert mem.read_word(addr) == value
    assert mem.read_blob(addr, 8) == struct.pack("<Q", value)


def test_word_write_masks_to_64_bits():
    mem = PhysicalMemory()
    mem.write_word(0, (1 << 70) + 5)
    assert mem.read_word(0) == 5


def test_unaligned_word_straddles_pages():
    mem = PhysicalMemory()
    addr = 4096 - 3                 # spans the page boundary
    mem.write_word(addr, 0x1122334455667788)
    assert mem.read_word(addr) == 0x1122334455667788
    assert mem.read_byte(4095) == 0x66          # third-lowest byte
    assert mem.read_byte(4096) == 0x55


def test_blob_round_trip():
    mem = PhysicalMemory()
    mem.write_blob(999, b"hello world")
    assert mem.read_blob(999, 11) == b"hello world"
    assert mem.read_byte(999 + 4) == ord("o")


def test_pages_allocate_sparsely():
    mem = PhysicalMemory()
    mem.write_byte(0x100000, 1)
    mem.write_byte(0x900000, 2)
    assert set(mem.pages) == {0x100000 // 4096, 0x900000 // 4096}


# --------------------------------------------------------------------------
# cache hierarchy: hand-built witnesses

def test_latency_ladder():
    cfg = CacheConfig()
    h = CacheHierarchy(cfg)
    assert h.access(0x1000) == cfg.lat_mem      # cold
    assert h.access(0x1000) == cfg.lat_l1       # warm
    assert h.access(0x1008) == cfg.lat_l1       # same 64-byte line
    h.clflush(0x1000)
    assert h.present(0x1000) is None
    assert h.access(0x1000) == cfg.lat_mem      # flushed


def test_l1_eviction_leaves_llc_copy():
    cfg = CacheConfig(l1_sets=1, l1_ways=2, llc_sets=1, llc_ways=8)
    h = CacheHierarchy(cfg)
    a, b, c = 0x0, 0x40, 0x80                   # one line each, same set
    h.access(a), h.access(b)
    h.access(c)                                 # evicts a from L1 silently
    assert h.present(a) == "llc"
    assert h.access(a) == cfg.lat_llc


def test_llc_eviction_back_invalidates_l1():
    # L1 has room for 8, LLC for only 4: the inclusion rule must throw
    # lines out of L1 when the LLC sheds them.
    cfg = CacheConfig(l1_sets=1, l1_ways=8, llc_sets=1, llc_ways=4)
    h = CacheHierarchy(cfg)
    lines = [i * 0x40 for i in range(5)]
    for addr in lines[:4]:
        h.access(addr)
    assert h.present(lines[0]) == "l1"
    h.access(lines[4])                          # LLC evicts lines[0]
    assert h.present(lines[0]) is None          # gone from L1 too
    assert h.access(lines[0]) == cfg.lat_mem
    assert h.check_inclusion()


def test_lru_eviction_order():
    cfg = CacheConfig(l1_sets=1, l1_ways=2, llc_sets=1, llc_ways=8)
    h = CacheHierarchy(cfg)
    a, b, c = 0x0, 0x40, 0x80
    h.access(a), h.access(b)
    h.access(a)                                 # a is now most recent in L1
    h.access(c)                                 # evicts b from L1, not a
    assert h.present(a) == "l1"
    assert h.present(b) == "llc"
    assert h.present(c) == "l1"


def test_l1_hits_do_not_refresh_llc_recency():
    # An L1 hit is invisible to the LLC, so a line hot in L1 can still be
    # the LLC's eviction victim - and inclusion then knocks it out of L1.
    cfg = CacheConfig(l1_sets=1, l1_ways=2, llc_sets=1, llc_ways=2)
    h = CacheHierarchy(cfg)
    a, b, c = 0x0, 0x40, 0x80
    h.access(a), h.access(b)
    h.access(a)                                 # L1 hit; LLC order still b,a
    h.access(c)                                 # LLC evicts a, despite L1 heat
    assert h.present(a) is None
    assert h.check_inclusion()


def test_speculative_and_write_flags_do_not_change_behavior():
    h1, h2 = CacheHierarchy(), CacheHierarchy()
    for addr in [0x0, 0x1000, 0x0, 0x2000]:
        lat1 = h1.access(addr, is_write=True, speculative=True)
        lat2 = h2.access(addr)
        assert lat1 == lat2
    assert h1.l1 == h2.l1 and h1.llc == h2.llc


def test_counters_add_up():
    h = CacheHierarchy()
    rng = random.Random(0)
    n = 500
    for _ in range(n):
        h.access(rng.randrange(0, 1 << 16))
    assert h.hits_l1 + h.hits_llc + h.misses == n


def test_config_validation():
    import pytest
    with pytest.raises(ValueError):
        CacheConfig(l1_sets=0)                  # counts must be positive
    with pytest.raises(ValueError):
        CacheConfig(lat_l1=100, lat_mem=50)     # inverted latencies


# --------------------------------------------------------------------------
# differential: every latency, eviction and counter against the model

def _mirror(cfg: CacheConfig) -> CacheModel:
    return CacheModel(line_size=cfg.line_size,
                      l1_sets=cfg.l1_sets, l1_ways=cfg.l1_ways,
                      llc_sets=cfg.llc_sets, llc_ways=cfg.llc_ways,
                      lat_l1=cfg.lat_l1, lat_llc=cfg.lat_llc,
                      lat_mem=cfg.lat_mem)


def _drive(cfg: CacheConfig, seed: int, steps: int,
           addr_space: int) -> None:
    real, model = CacheHierarchy(cfg), _mirror(cfg)
    rng = random.Random(seed)
    for i in range(steps):
        addr = rng.randrange(0, addr_space)
        if rng.random() < 0.1:
            real.clflush(addr)
            model.clflush(addr)
            continue
        assert real.access(addr) == model.access(addr), f"step {i}"
    assert (real.hits_l1, real.hits_llc, real.misses) == \
        (model.hits_l1, model.hits_llc, model.misses)
    model_l1, model_llc = model.cached_lines()
    assert {ln for s in real.l1 for ln in s} == model_l1
    assert {ln for s in real.llc for ln in s} == model_llc
    assert real.check_inclusion()


def test_differential_default_config():
    _drive(CacheConfig(), seed=1, steps=4000, addr_space=1 << 18)


def test_differential_tiny_sets_heavy_conflict():
    cfg = CacheConfig(l1_sets=2, l1_ways=2, llc_sets=4, llc_ways=4)
    _drive(cfg, seed=2, steps=4000, addr_space=1 << 12)


def test_differential_llc_smaller_than_l1():
    cfg = CacheConfig(l1_sets=1, l1_ways=8, llc_sets=1, llc_ways=4)
    _drive(cfg, seed=3, steps=3000, addr_space=1 << 10)


@given(seed=st.integers(0, 1 << 16))
def test_differential_property(seed):
    cfg = CacheConfig(l1_sets=2, l1_ways=2, llc_sets=4, llc_ways=3)
    _drive(cfg, seed=seed, steps=300, addr_space=1 << 11)
