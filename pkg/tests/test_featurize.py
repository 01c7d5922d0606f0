import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepmaps import featurize as fz
from deepmaps.core import ConfigurationError, GridSpec, LabelSet, ShapeError
from deepmaps.ingest import StationMeta

from oracles import conv_direct


def static_volume(rng, w, h, n):
    return fz.StaticVolume(rng.standard_normal((w, h, n)), [f"geography_s{i}" for i in range(n)],
                           ["geography"] * n)


def dynamic_volume(rng, hours, w, h, n):
    return fz.DynamicVolume(rng.standard_normal((hours, w, h, n)), [f"transport_d{i}" for i in range(n)],
                            ["transport"] * n)


def test_filter_bank_determinism_and_draw_order():
    a = fz.build_filter_bank("A", 4, 3, seed=11)
    b = fz.build_filter_bank("A", 4, 3, seed=11)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.weights.ravel(), np.random.default_rng(11).standard_normal(12))
    k = a.kernels()
    assert k.shape == (4, 3, 3, 3)
    np.testing.assert_allclose(k[2, 1, 0, :], a.weights[2] / 9)
    c = fz.build_filter_bank("C", 2, 5, seed=1).kernels()
    assert c.shape == (2, 1, 1, 5)
    with pytest.raises(ConfigurationError):
        fz.build_filter_bank("Z", 1, 1, 0)
    with pytest.raises(ConfigurationError):
        fz.build_filter_bank("A", 0, 1, 0)


def test_convolve_static_matches_nested_loops():
    rng = np.random.default_rng(0)
    vol = static_volume(rng, 8, 8, 3)
    bank_a = fz.build_filter_bank("A", 2, 3, 1)
    bank_b = fz.build_filter_bank("B", 2, 3, 2)
    got = fz.convolve_static(vol, bank_a, bank_b)
    want = np.concatenate([conv_direct(vol.data, bank_a.kernels()), conv_direct(vol.data, bank_b.kernels())], -1)
    assert got.shape == (8, 8, 4)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


def test_convolve_dynamic_matches_nested_loops_every_hour():
    rng = np.random.default_rng(1)
    dyn = dynamic_volume(rng, 3, 6, 6, 2)
    banks = [fz.build_filter_bank(f, 2, 4, s) for s, f in enumerate("CDE")]
    stacked = fz.convolve_dynamic(dyn.stacked(), *banks)
    for t in range(3):
        vt = dyn.at(t)
        want = np.concatenate([conv_direct(vt, b.kernels()) for b in banks], -1)
        np.testing.assert_allclose(fz.convolve_dynamic(vt, *banks), want, atol=1e-9)
        np.testing.assert_allclose(stacked[t], want, atol=1e-9)


def test_zero_volume_gives_zero_map():
    vol = fz.StaticVolume(np.zeros((5, 5, 2)), ["a", "b"], ["x", "x"])
    out = fz.convolve_static(vol, fz.build_filter_bank("A", 3, 2, 0), fz.build_filter_bank("B", 3, 2, 1))
    assert np.all(out == 0)


def test_constant_field_border_fractions():
    c = 7.0
    vol = np.full((6, 6, 1), c)
    bank = fz.FilterBank("A", np.ones((1, 1)), 0)
    out = fz.convolve(vol, bank)[..., 0]
    assert np.allclose(out[1:-1, 1:-1], c)
    assert out[0, 0] == pytest.approx(c * 4 / 9)
    assert out[0, 3] == pytest.approx(c * 6 / 9)


def test_previous_hour_replicated_at_start():
    rng = np.random.default_rng(2)
    dyn = dynamic_volume(rng, 2, 3, 3, 2)
    v0 = dyn.at(0)
    np.testing.assert_array_equal(v0[..., :2], v0[..., 2:])
    np.testing.assert_array_equal(dyn.at(1)[..., 2:], dyn.data[0])


def test_depth_mismatch_is_shape_error():
    vol = np.zeros((4, 4, 3))
    with pytest.raises(ShapeError):
        fz.convolve(vol, fz.build_filter_bank("A", 1, 2, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_linearity_before_rectifier(seed, alpha):
    rng = np.random.default_rng(seed)
    vol = np.abs(rng.standard_normal((5, 4, 2)))
    bank = fz.FilterBank("B", np.abs(rng.standard_normal((2, 2))), seed)
    np.testing.assert_allclose(fz.convolve(alpha * vol, bank), alpha * fz.convolve(vol, bank), rtol=1e-12,
                               atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_maps_non_negative(seed):
    rng = np.random.default_rng(seed)
    maps = fz.build_feature_maps(static_volume(rng, 5, 6, 2), dynamic_volume(rng, 3, 5, 6, 2), 3, 2, seed)
    assert np.all(maps.static >= 0) and np.all(maps.dynamic >= 0)
    assert maps.static.shape == (5, 6, 6) and maps.dynamic.shape == (3, 5, 6, 6)


def test_feature_map_seeding_is_documented():
    rng = np.random.default_rng(3)
    s, d = static_volume(rng, 4, 4, 2), dynamic_volume(rng, 2, 4, 4, 1)
    maps = fz.build_feature_maps(s, d, 2, 2, seed=4)
    a = fz.build_filter_bank("A", 2, 2, 20)
    b = fz.build_filter_bank("B", 2, 2, 21)
    np.testing.assert_array_equal(maps.static, fz.convolve_static(s, a, b))
    assert maps.static_names == ["nbr_A0", "nbr_A1", "nbr_B0", "nbr_B1"]
    assert maps.dynamic_names[-1] == "nbr_E1"


def test_transport_shift():
    assert fz.transport_shift(10.0, 5.0) == 2
    assert fz.transport_shift(1.0, 50.0) == 1
    assert fz.transport_shift(500.0, 5.0) == 12
    assert fz.transport_shift(12.5, 5.0) == 3  # 2.5 rounds half up
    assert fz.transport_shift(10.0, 0.0) == 12


def test_macro_column_count_and_names():
    stations = tuple(fz.MacroStation(f"X{i}", 10.0, 30.0 * i, [1, 2, 3, 6][i % 4]) for i in range(12))
    cfg = fz.MacroConfig(stations)
    assert len(cfg.columns()) == 48
    cfg2 = fz.MacroConfig((fz.MacroStation("far", 60.0, 0.0, 9),))
    assert cfg2.columns() == ["macro_far_1", "macro_far_2", "macro_far_3", "macro_far_6", "macro_far_9"]
    with pytest.raises(ConfigurationError):
        fz.MacroConfig(stations, (0, 1))


def test_derive_macro_config_geometry():
    spec = GridSpec(39.7, 116.15, 1.0, 10, 10, 0, 24)
    ce, cn = spec.centroid_km
    lat, lon = spec.to_latlon(ce - 30.0, cn + 30.0)  # north-west of the centre
    meta = [StationMeta("in", *spec.cell_center(1, 1), True), StationMeta("nw", float(lat), float(lon), False)]
    cfg = fz.derive_macro_config(meta, spec, mean_wind_kmh=10.0)
    (st_,) = cfg.stations
    assert st_.station_id == "nw"
    assert st_.bearing_deg == pytest.approx(315.0)
    assert st_.distance_km == pytest.approx(30.0 * np.sqrt(2))
    assert st_.shift == 4


def test_constant_series_gives_constant_columns():
    cfg = fz.MacroConfig((fz.MacroStation("a", 10.0, 0.0, 5), fz.MacroStation("b", 10.0, 0.0, 2)))
    series = fz.MacroSeries(["a", "b"], -12, np.vstack([np.full(40, 3.0), np.full(40, 8.0)]))
    row = fz.macro_feature_rows(series, cfg, 4)
    assert all(v == 3.0 for k, v in row.items() if k.startswith("macro_a_"))
    assert all(v == 8.0 for k, v in row.items() if k.startswith("macro_b_"))


def test_macro_shift_reads_the_past():
    cfg = fz.MacroConfig((fz.MacroStation("a", 10.0, 0.0, 2),), (1, 3))
    series = fz.MacroSeries(["a"], -5, np.arange(20.0)[None, :])
    row = fz.macro_feature_rows(series, cfg, 4)
    # series value at hour h is h + 5
    assert row == {"macro_a_1": 8.0, "macro_a_2": 7.0, "macro_a_3": 6.0}
    assert fz.macro_feature_rows(series, cfg, -3) is None


def test_forward_fill_limit():
    nan = np.nan
    s = np.array([[1.0, nan, nan, nan, nan, 2.0, nan, 3.0]])
    out = fz.forward_fill(s, 3)
    np.testing.assert_array_equal(out[0, :4], [1, 1, 1, 1])
    assert np.isnan(out[0, 4])
    np.testing.assert_array_equal(out[0, 5:], [2, 2, 3])
    lead = fz.forward_fill(np.array([[nan, 1.0]]), 3)
    assert np.isnan(lead[0, 0])


def small_context(rng, with_macro=True):
    spec = GridSpec(39.7, 116.15, 1.0, 4, 3, 0, 6)
    s = static_volume(rng, 4, 3, 3)
    d = dynamic_volume(rng, 6, 4, 3, 2)
    maps = fz.build_feature_maps(s, d, 2, 2, 0)
    macro = None
    if with_macro:
        cfg = fz.MacroConfig((fz.MacroStation("X0", 20.0, 315.0, 2),), (1, 3))
        vals = rng.uniform(10, 50, (1, 6 + 12))
        vals[0, 12 + 4] = np.nan  # hour 4 unavailable, so rows at t = 5 mask
        macro = fz.MacroFeatures(fz.MacroSeries(["X0"], -12, vals), cfg)
    return fz.FeatureContext(spec, s, d, maps, macro)


def test_assemble_columns_and_order():
    rng = np.random.default_rng(5)
    ctx = small_context(rng)
    rows = (np.array([3, 0, 1, 2]), np.array([0, 2, 1, 0]), np.array([4, 0, 3, 3]), np.array([1.0, 2, 3, 4]))
    fm = ctx.assemble(rows, "L+M+N")
    assert fm.keys() == [(0, 2, 0), (2, 0, 3), (1, 1, 3), (3, 0, 4)]
    np.testing.assert_array_equal(fm.response, [2.0, 4.0, 3.0, 1.0])
    n_l, n_n, n_m = 3 + 2, 2 * 2 + 3 * 2, 3
    assert len(fm.columns) == n_l + n_n + n_m
    assert fm.groups == ["L"] * n_l + ["N"] * n_n + ["M"] * n_m
    assert fm.categories[:5] == ["geography"] * 3 + ["transport"] * 2
    assert set(fm.categories[n_l:n_l + n_n]) == {"neighboring"}
    # local values read the raw volumes at the row's own cell and hour
    np.testing.assert_array_equal(fm.values[1, :3], ctx.static.data[2, 0])
    np.testing.assert_array_equal(fm.values[1, 3:5], ctx.dynamic.data[3, 2, 0])
    np.testing.assert_array_equal(fm.values[1, n_l:n_l + 4], ctx.maps.static[2, 0])


def test_macro_constant_across_cells_and_masking():
    rng = np.random.default_rng(6)
    ctx = small_context(rng)
    xs, ys = ctx.spec.all_cells()
    fm = ctx.assemble((xs, ys, np.full(len(xs), 4)), "M")
    assert len(fm) == len(xs) and np.all(fm.values == fm.values[0])
    # hour 5 with shift 1 hits the masked series hour, so every row drops
    fm2 = ctx.assemble((xs, ys, np.full(len(xs), 5)), "L+M")
    assert len(fm2) == 0 and fm2.dropped == len(xs)


def test_selection_column_counts():
    # N_s = 30, N_d = 20 -> 50 local columns; L = M = 8 -> 40 neighbouring columns
    rng = np.random.default_rng(7)
    s = static_volume(rng, 3, 3, 30)
    d = dynamic_volume(rng, 2, 3, 3, 20)
    maps = fz.build_feature_maps(s, d, 8, 8, 0)
    rows = (np.array([0]), np.array([0]), np.array([1]))
    assert len(fz.assemble_matrix(rows, s, d, maps, None, "L").columns) == 50
    assert len(fz.assemble_matrix(rows, s, d, maps, None, "N").columns) == 40
    with pytest.raises(ConfigurationError):
        fz.assemble_matrix(rows, s, d, maps, None, "")
    with pytest.raises(ConfigurationError):
        fz.assemble_matrix(rows, s, d, None, None, "N")
    with pytest.raises(ConfigurationError):
        fz.assemble_matrix(rows, s, d, maps, None, "L+M")


def test_selection_names():
    assert fz.selection_name("lmn") == "L+M+N"
    assert fz.selection_name(["M", "L"]) == "L+M"
    with pytest.raises(ConfigurationError):
        fz.parse_selection("L+Q")


def test_assembly_is_deterministic_and_exports(tmp_path):
    rng = np.random.default_rng(8)
    ctx = small_context(rng)
    labels = LabelSet(np.array([0, 1]), np.array([0, 2]), np.array([3, 4]), np.array([10.0, 20.0]),
                      np.array([True, False]))
    a = ctx.assemble(labels, "L+M+N")
    b = ctx.assemble(labels, "L+M+N")
    assert a.values.tobytes() == b.values.tobytes()
    a.to_csv(tmp_path / "f.csv", header="# config_hash=x\n")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=x"
    assert lines[1].split(",")[:3] == ["x", "y", "t"] and lines[1].endswith(",pm25")
    assert len(lines) == 4
    meta = json.loads((tmp_path / "f.meta.json").read_text())
    assert meta["macro_X0_2"] == {"group": "M", "category": "macro"}
    sub = a.select_groups("N")
    assert set(sub.groups) == {"N"} and len(sub) == 2
