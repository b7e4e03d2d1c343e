import json

import pytest

from smearlab.acquisition import (MODES, _Rate, NO_NOISE, NoiseProfile, PageDumper, SidecarError,
                                  load_sidecar, noise_profile, replay, run_linear_dump,
                                  sidecar_dict, stream_duration, write_sidecar)
from smearlab.memory import PAGE_SIZE, digest_bytes
from smearlab.oracle import analyze_dump, smearing_report
from smearlab.workload import generate_events, os_profile
from smearlab.world import World, WorldConfig


def small_run(seed=1, mode="kernel-direct", ppt=4.0, mem=2 << 20, frozen=False):
    world = World(WorldConfig(mem_size=mem, seed=seed))
    stream = None
    if not frozen:
        stream = generate_events(os_profile("linux"), stream_duration(world.mem.page_count, ppt),
                                 seed, world)
    noise = NO_NOISE if frozen else noise_profile(mode)
    return world, run_linear_dump(world, stream, ppt, noise)


def test_frozen_dump_is_a_snapshot():
    world, res = small_run(frozen=True)
    assert bytes(res.image) == world.mem.snapshot()
    assert res.total_writes == 0
    ticks = res.timeline.page_ticks
    assert ticks == sorted(ticks) and len(set(ticks)) == len(ticks)


def test_digests_match_image():
    _, res = small_run()
    for k, d in enumerate(res.timeline.digests):
        assert d == digest_bytes(res.image[k * PAGE_SIZE:(k + 1) * PAGE_SIZE])


def test_run_is_deterministic():
    _, a = small_run(seed=7)
    _, b = small_run(seed=7)
    assert a.image == b.image and a.log.to_list() == b.log.to_list()


def test_noise_lands_outside_structures():
    world, res = small_run(mode="user")
    scratch = set(world.regions["scratch"]) | set(world.regions["filler"])
    noisy = {e.pa // PAGE_SIZE for e in res.log if e.source == "noise"}
    assert noisy and noisy <= scratch


def test_mode_write_ratio():
    _, kd = small_run(seed=3, mode="kernel-direct")
    _, us = small_run(seed=3, mode="user")
    assert kd.mutator_writes == us.mutator_writes
    assert us.total_writes / kd.total_writes == pytest.approx(1.82, abs=0.01)


def test_noise_profile_validation():
    with pytest.raises(ValueError):
        NoiseProfile("x", 1.0, 0)
    with pytest.raises(ValueError):
        NoiseProfile("x", write_amplification=0.5)
    with pytest.raises(ValueError):
        noise_profile("dma")
    assert set(MODES) == {"kernel-direct", "kernel-buffered", "user"}


def test_piecewise_rate_schedule():
    rate = _Rate([[0, 1.0], [100, 8.0]])
    assert rate.at(0) == 1.0 and rate.at(99) == 1.0 and rate.at(100) == 8.0
    assert stream_duration(512, [[0, 1.0], [100, 8.0]]) == 513
    assert stream_duration(512, 16.0) == 33
    with pytest.raises(ValueError):
        _Rate([[5, 1.0]])


def test_dump_order_must_be_permutation():
    world = World(WorldConfig(mem_size=2 << 20, seed=0))
    with pytest.raises(ValueError):
        PageDumper(world.mem, world.log, order=[0, 0, 1])


def test_sidecar_replay_roundtrip(tmp_path):
    world, res = small_run(seed=5)
    path = tmp_path / "d.json"
    write_sidecar(path, sidecar_dict(world, res, {"seed": 5}))
    doc = load_sidecar(path)
    images = {}
    rep = replay(doc, lambda e, mem: images.__setitem__(e.page, mem.page(e.page)))
    image = b"".join(images[k] for k in range(doc["page_count"]))
    assert image == bytes(res.image)
    assert analyze_dump(rep.graph, rep.timeline).to_dict() == \
        analyze_dump(world.graph, res.timeline).to_dict()
    assert smearing_report(image, rep.timeline, rep.aspace).to_dict() == \
        smearing_report(res.image, res.timeline, world.aspace).to_dict()


def test_tampered_sidecar_is_rejected(tmp_path):
    world, res = small_run(seed=2)
    doc = sidecar_dict(world, res)
    doc["dump"]["digests"] = list(doc["dump"]["digests"])
    first_dump = next(e for e in doc["events"] if e["kind"] == "dump")
    first_dump["digest"] = "0" * 32
    with pytest.raises(SidecarError):
        replay(doc)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(SidecarError):
        load_sidecar(bad)
