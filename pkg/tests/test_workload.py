from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from smearlab.workload import (ProfileError, WorkloadProfile, generate_events, os_profile,
                               profile_names)
from smearlab.world import World, WorldConfig


def test_profiles_exist():
    assert profile_names() == ["linux", "vxworks", "windows"]
    with pytest.raises(ProfileError):
        os_profile("plan9")


@pytest.mark.parametrize("name,p8", [("linux", 0.875), ("windows", 0.7793), ("vxworks", 0.789)])
def test_eight_byte_share_is_exact(name, p8):
    mix = os_profile(name).write_size_mix
    assert mix[8] == pytest.approx(p8, abs=1e-12)
    assert sum(mix.values()) == pytest.approx(1.0, abs=1e-12)


def test_write_rates_ordered():
    rates = {n: os_profile(n).writes_per_tick for n in profile_names()}
    assert rates["vxworks"] < rates["linux"] < rates["windows"]


def test_profile_dict_roundtrip():
    p = os_profile("windows")
    assert WorkloadProfile.from_dict(p.to_dict()) == p


@pytest.mark.parametrize("kw", [{"writes_per_tick": -1}, {"write_size_mix": {1: .5, 2: .5, 4: .5, 8: 0}},
                                {"pointer_fraction": 2.0}])
def test_profile_validation(kw):
    with pytest.raises(ProfileError):
        os_profile("linux").with_overrides(**kw)


def test_generation_is_deterministic():
    world = World(WorldConfig(mem_size=2 << 20, seed=4))
    a = generate_events(os_profile("linux"), 2000, 4, world)
    b = generate_events(os_profile("linux"), 2000, 4, world)
    assert a.to_bytes() == b.to_bytes()
    assert generate_events(os_profile("linux"), 2000, 5, world).to_bytes() != a.to_bytes()


@pytest.mark.parametrize("name", ["linux", "windows", "vxworks"])
def test_empirical_rates_track_profile(name):
    p = os_profile(name)
    ticks = int(11_000 / p.writes_per_tick)
    stream = generate_events(p, ticks, 0, World(WorldConfig(mem_size=4 << 20, seed=0)))
    assert len(stream.ops) >= 10_000
    widths = Counter(stream.write_widths())
    n = sum(widths.values())
    for w, share in p.write_size_mix.items():
        assert abs(widths[w] / n - share) <= 0.05 * share, (w, widths[w] / n, share)
    assert abs(widths[8] / n - p.write_size_mix[8]) <= 0.02 * p.write_size_mix[8]
    regions = Counter(stream.write_regions())
    n = sum(regions.values())
    for r, share in p.region_mix.items():
        assert abs(regions[r] / n - share) <= 0.05 * share, (r, regions[r] / n, share)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["linux", "windows", "vxworks"]))
def test_stream_applies_cleanly(seed, name):
    world = World(WorldConfig(mem_size=2 << 20, seed=seed))
    stream = generate_events(os_profile(name), 1500, seed, world)
    for op in stream.ops:
        world.apply(op)
