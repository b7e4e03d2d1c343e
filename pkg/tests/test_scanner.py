import struct

import pytest
from hypothesis import given, strategies as st

from smearlab.scanner import (ScanError, ScanRecord, hilbert_index, hilbert_map, plot_order,
                              pointer_inconsistency_scan, scan_page)

BASE = 0xFFFF800000000000


def direct(va):
    off = va - BASE
    return off if 0 <= off < 1 << 20 else None


def page_with(values, offsets):
    buf = bytearray(4096)
    for v, off in zip(values, offsets):
        buf[off:off + 8] = struct.pack("<Q", v)
    return bytes(buf)


def test_scan_page_filters_range_and_translation():
    page = page_with([BASE + 0x2000, 0x1234, BASE + (1 << 30), BASE + 0x10], [0, 8, 16, 4088])
    cands = scan_page(page, BASE, direct, page_index=3)
    assert [(c.found_at, c.resolved_pa) for c in cands] == [(3 * 4096, 0x2000), (3 * 4096 + 4088, 0x10)]
    assert cands[0].distance == 0x1000 and cands[0].pointed_page == 2


def test_unaligned_scan_finds_odd_offsets():
    page = page_with([BASE + 0x3000], [5])
    assert scan_page(page, BASE, direct) == []
    assert [c.found_at for c in scan_page(page, BASE, direct, unaligned=True)] == [5]


def test_scan_page_rejects_short_pages():
    with pytest.raises(ScanError):
        scan_page(b"\x00" * 100, BASE, direct)


def test_zero_page_has_no_candidates():
    assert scan_page(bytes(4096), BASE, direct) == []


def test_scan_stats_per_slot():
    recs = [ScanRecord(0, BASE, 0x1000, 5, "a", "a"),
            ScanRecord(8, BASE, 0x1000, 5, "b", "a"),
            ScanRecord(4096, BASE, 0x1008, 6, "b", "a")]
    res = pointer_inconsistency_scan(None, recs)
    assert res.stats.candidates == 3 and res.stats.inconsistent_count == 2
    assert res.stats.inconsistent_ratio == pytest.approx(2 / 3)
    assert res.stats.mean_distance == pytest.approx((4096 + 4088 + 8) / 3)
    assert res.flagged_pages == [0, 1]


def test_scan_needs_a_dump_digest():
    with pytest.raises(ScanError):
        pointer_inconsistency_scan(None, [ScanRecord(0, BASE, 0, 1, "a")])


def test_hilbert_order_one():
    assert [hilbert_map(i, 1) for i in range(4)] == [(0, 0), (0, 1), (1, 1), (1, 0)]


@pytest.mark.parametrize("order", range(1, 7))
def test_hilbert_bijection_and_adjacency(order):
    cells = [hilbert_map(i, order) for i in range(4 ** order)]
    assert len(set(cells)) == 4 ** order
    assert all(hilbert_index(x, y, order) == i for i, (x, y) in enumerate(cells))
    assert all(abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1 for a, b in zip(cells, cells[1:]))


@given(st.integers(0, 4 ** 10 - 1))
def test_hilbert_roundtrip_order_10(i):
    assert hilbert_index(*hilbert_map(i, 10), 10) == i


def test_plot_order():
    assert [plot_order(n) for n in (1, 4, 5, 16, 16384)] == [0, 1, 2, 2, 7]
    with pytest.raises(ValueError):
        hilbert_map(16, 2)


def test_rescan_of_exported_dump_matches_in_run_scan(tmp_path):
    from smearlab.acquisition import load_sidecar
    from smearlab.runner import RunConfig, rescan, run_once, write_run

    cfg = RunConfig(mem_size=4 << 20).validate()
    run = run_once(cfg, 1)
    write_run(run, tmp_path, cfg)
    image = (tmp_path / "dump.raw").read_bytes()
    result, cands = rescan(image, load_sidecar(tmp_path / "dump.sidecar.json"))
    assert result.stats == run.scan.stats
    assert result.flagged_pages == run.scan.flagged_pages
    assert len(cands) == run.scan.stats.candidates
