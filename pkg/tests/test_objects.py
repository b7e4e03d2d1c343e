import pytest

from smearlab import events as ev
from smearlab.memory import PAGE_SIZE, PhysicalMemory
from smearlab.objects import (GraphError, ObjectGraph, load_schemas, parse_schemas,
                              schemas_to_doc)
from smearlab.scenarios import Lab

from oracles import SMALL_SCHEMAS


@pytest.fixture(scope="module")
def schemas():
    return load_schemas()


def test_shipped_schema(schemas):
    assert len(schemas) == 17
    vma = schemas["vm_area_struct"]
    assert vma.field("vm_next").is_pointer and vma.field("vm_next").target == "vm_area_struct"
    assert vma.field("vm_pgoff").offset == 152
    for s in schemas.values():
        for f in s.pointer_fields:
            assert f.target is None or f.target in schemas


def test_schema_doc_roundtrip(schemas):
    assert parse_schemas(schemas_to_doc(schemas)) == schemas


@pytest.mark.parametrize("bad", [
    {"name": "x", "size": 8, "fields": [{"name": "a", "offset": 4, "width": 8}]},
    {"name": "x", "size": 16, "fields": [{"name": "a", "offset": 0, "width": 8},
                                         {"name": "b", "offset": 4, "width": 4}]},
    {"name": "x", "size": 16, "fields": [{"name": "a", "offset": 0, "width": 4, "kind": "pointer"}]},
    {"name": "x", "size": 16, "fields": [{"name": "a", "offset": 0, "width": 3}]},
])
def test_schema_validation(bad):
    with pytest.raises(ValueError):
        parse_schemas({"types": [bad]})


def test_unknown_pointer_target():
    with pytest.raises(ValueError):
        parse_schemas({"types": [{"name": "x", "size": 8, "fields": [
            {"name": "p", "offset": 0, "width": 8, "kind": "pointer", "target": "nope"}]}]})


def test_alloc_zeroes_and_free_poisons():
    g = ObjectGraph(PhysicalMemory(4 * PAGE_SIZE), SMALL_SCHEMAS)
    a = g.alloc_struct("node")
    g.write_field(a.uid, "key", 0xDEAD)
    assert g.read_field(a.uid, "key") == 0xDEAD
    g.free_struct(a.uid)
    assert g.mem.read(a.base_pa, 8) == b"\x6b" * 8
    b = g.alloc_struct("node")
    assert b.base_pa == a.base_pa          # slab slot reuse
    assert g.read_field(b.uid, "key") == 0
    with pytest.raises(GraphError):
        g.write_field(a.uid, "key", 1)


def test_pointer_rules():
    g = ObjectGraph(PhysicalMemory(4 * PAGE_SIZE), SMALL_SCHEMAS, kernel_base=0xFFFF800000000000)
    n = g.alloc_struct("node")
    i = g.alloc_struct("item")
    with pytest.raises(GraphError):
        g.set_pointer(n.uid, "next", i.uid)     # wrong target type
    with pytest.raises(GraphError):
        g.write_field(n.uid, "next", 5)         # pointer through the data path
    g.set_pointer(n.uid, "item", i.uid)
    assert g.read_field(n.uid, "item") == 0xFFFF800000000000 + i.base_pa
    g.set_pointer(n.uid, "item", None)
    assert n.pointer_history["item"] == [(2, i.uid), (3, None)]


def test_multi_page_struct_spans_pages():
    g = ObjectGraph(PhysicalMemory(8 * PAGE_SIZE), SMALL_SCHEMAS)
    b = g.alloc_struct("blob")
    assert len(b.pages) == 2 and b.base_pa % PAGE_SIZE == 0


def test_straddled_struct():
    lab = Lab(8, SMALL_SCHEMAS, straddle_prob=1.0)
    n = lab.graph.structs[lab.alloc("node")]
    assert len(n.pages) == 2


def test_freeze_records_targets():
    lab = Lab(4, SMALL_SCHEMAS)
    n, i = lab.alloc("node"), lab.alloc("item")
    lab.point(n, "item", i)
    lab.write(i, "val", 7)
    lab.dump_through(lab.page_of(n))
    fz = lab.graph.frozen[(n, lab.page_of(n))]
    snap = fz.targets["item"]
    assert snap.uid == i and snap.image[8:16] == (7).to_bytes(8, "little")
    assert not fz.partial


def test_replay_from_log_matches():
    lab = Lab(4, SMALL_SCHEMAS)
    n, i = lab.alloc("node"), lab.alloc("item")
    lab.point(n, "item", i)
    lab.free(i)
    g2 = ObjectGraph(PhysicalMemory(4 * PAGE_SIZE), SMALL_SCHEMAS)
    for e in lab.log:
        if e.kind != ev.DUMP:
            g2.apply_logged(e)
    assert g2.mem.snapshot() == lab.mem.snapshot()
    assert g2.structs[i].free_tick == lab.graph.structs[i].free_tick


def test_slab_objects_are_word_aligned(schemas):
    lab = Lab(64, schemas, straddle_prob=0.5, seed=2)
    for name in ("fdtable", "vm_area_struct", "file", "dentry"):
        for _ in range(6):
            uid = lab.alloc(name)
            assert lab.graph.structs[uid].base_pa % 8 == 0
