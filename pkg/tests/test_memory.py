import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from smearlab.memory import (KERNEL, LARGE_PAGE_SIZE, PAGE_SIZE, AddressSpaceError, AllocationError,
                             FrameAllocator, MappingPlan, MappingRegistry, MappingRecord,
                             PhysicalMemory, Placement, affected_va_size, build_address_space,
                             canonicalize, digest_bytes, entry_frame, image_reader,
                             is_canonical, iter_mapped_pages, make_entry, table_index, walk)

from oracles import enumerate_tree, random_address_space

BASE = 0xFFFF800000000000


def test_affected_va_sizes():
    assert [affected_va_size(l) for l in (3, 2, 1, 0)] == [4 << 10, 2 << 20, 1 << 30, 512 << 30]
    with pytest.raises(ValueError):
        affected_va_size(4)


def test_digest_is_blake2b_128():
    assert digest_bytes(b"abc") == hashlib.blake2b(b"abc", digest_size=16).hexdigest()
    # pinned so a silent change of algorithm breaks sidecar compatibility loudly
    assert digest_bytes(bytes(PAGE_SIZE)) == "5f6df6002bc71ca2d81a7492de37025d"


def test_entry_roundtrip():
    e = make_entry(0x1234, user=True, large=True)
    assert entry_frame(e) == 0x1234
    assert e & 1 and e & 0x80 and e & 4


@given(st.integers(0, (1 << 48) - 1))
def test_canonicalize_gives_canonical(va):
    c = canonicalize(va)
    assert is_canonical(c)
    assert c & ((1 << 48) - 1) == va


def test_table_index_of_kernel_base():
    assert table_index(BASE, 0) == 256
    assert [table_index(BASE, l) for l in (1, 2, 3)] == [0, 0, 0]


def test_physical_memory_bounds():
    mem = PhysicalMemory(2 * PAGE_SIZE)
    mem.write(PAGE_SIZE - 4, b"\x01" * 8)
    assert mem.read(PAGE_SIZE - 4, 8) == b"\x01" * 8
    with pytest.raises(Exception):
        mem.read(2 * PAGE_SIZE - 4, 8)


class TestFrameAllocator:
    @pytest.mark.parametrize("placement", list(Placement))
    def test_alloc_free_accounting(self, placement):
        fa = FrameAllocator(64, placement, seed=3)
        got = [fa.alloc() for _ in range(64)]
        assert sorted(got) == list(range(64))
        with pytest.raises(AllocationError):
            fa.alloc()
        fa.free(got[5])
        assert fa.alloc() == got[5]

    def test_contiguous_is_dense(self):
        fa = FrameAllocator(32)
        assert [fa.alloc() for _ in range(4)] == [0, 1, 2, 3]

    def test_chunked_stays_in_lower_half(self):
        fa = FrameAllocator(1024, Placement.CHUNKED)
        assert max(fa.alloc() for _ in range(100)) < 512

    def test_double_free(self):
        fa = FrameAllocator(4)
        f = fa.alloc()
        fa.free(f)
        with pytest.raises(AllocationError):
            fa.free(f)


def test_registry_split_on_remove():
    reg = MappingRegistry()
    reg.add(MappingRecord(0x10000, 0, 4 * PAGE_SIZE, PAGE_SIZE))
    reg.remove(0x11000, PAGE_SIZE)
    assert [(r.va, r.length) for r in reg] == [(0x10000, PAGE_SIZE), (0x12000, 2 * PAGE_SIZE)]
    with pytest.raises(AddressSpaceError):
        reg.add(MappingRecord(0x12000, 0, PAGE_SIZE, PAGE_SIZE))


def test_direct_map_uses_large_pages():
    a = build_address_space(4 << 20)
    t = walk(a.mem.read_u64, a.root(KERNEL).frame, BASE + 0x201234, a.page_count)
    assert t.pa == 0x201234 and t.page_size == LARGE_PAGE_SIZE


def test_walk_rejects_out_of_range_frames():
    a = build_address_space(2 << 20)
    image = a.mem.snapshot()
    assert walk(image_reader(image), a.page_count + 5, BASE, a.page_count) is None
    assert walk(image_reader(image), a.root(KERNEL).frame, 0x1234, a.page_count) is None


def test_user_half_is_private_and_kernel_half_shared():
    a = build_address_space(4 << 20)
    p1, p2 = a.create_process(), a.create_process()
    a.map(p1, 0x400000, 0x3000, PAGE_SIZE, user=True)
    assert a.translate(0x400000, p1) == 0x3000
    assert a.translate(0x400000, p2) is None
    assert a.translate(BASE + 0x5000, p2) == 0x5000
    with pytest.raises(AddressSpaceError):
        a.map(p1, BASE + (1 << 40), 0, PAGE_SIZE)


def test_remap_large_entry():
    a = build_address_space(4 << 20)
    a.remap(KERNEL, BASE, LARGE_PAGE_SIZE)
    assert a.translate(BASE + 8) == LARGE_PAGE_SIZE + 8
    assert a.registry_translate(BASE + 8) == LARGE_PAGE_SIZE + 8


def test_plan_from_dict():
    plan = MappingPlan.from_dict({"kernel_base": hex(BASE), "direct_map": False,
                                  "mappings": [{"va": hex(BASE + (1 << 30)), "frame": 3, "pages": 2}]})
    a = build_address_space(2 << 20, plan)
    assert a.translate(BASE + (1 << 30) + PAGE_SIZE) == 4 * PAGE_SIZE
    assert a.translate(BASE) is None


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_tree_matches_registry(seed):
    a, pids = random_address_space(seed, mem_size=4 << 20)
    for pid in pids:
        tree = enumerate_tree(a.mem.read_u64, a.root(pid).frame, a.page_count)
        reg = dict(iter_mapped_pages(a.registries[pid]))
        if pid != KERNEL:
            reg.update(iter_mapped_pages(a.registries[KERNEL]))
        assert tree == reg
