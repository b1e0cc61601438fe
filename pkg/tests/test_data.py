import warnings

import numpy as np
import pytest

from gnnpp.data import (
    AlignmentError,
    ForecastDataset,
    Normalizer,
    ParseError,
    SchemaError,
    SplitSpec,
    Station,
    fit_normalizer,
    load_dataset,
    load_dir,
    load_split,
    save_dataset,
    save_split,
    summarize_inputs,
    summarize_members,
)
from gnnpp.synth import SynthConfig, generate


def tiny(n_days=3, n_stations=2, n_members=11, n_features=2, seed=0):
    rng = np.random.default_rng(seed)
    stations = [Station(id=10 + s, lat=50.0 + s, lon=8.0, alt=100.0, orog=0.0) for s in range(n_stations)]
    feats = rng.normal(size=(n_days, n_stations, n_members, n_features))
    return ForecastDataset(
        stations,
        np.arange(n_days),
        [f"f{k}" for k in range(n_features)],
        feats,
        rng.normal(size=(n_days, 2)),
        rng.normal(size=(n_days, n_stations)),
    )


def test_station_bounds():
    with pytest.raises(ValueError):
        Station(id=1, lat=91.0, lon=0.0, alt=0.0, orog=0.0)
    with pytest.raises(ValueError):
        Station(id=1, lat=0.0, lon=-181.0, alt=0.0, orog=0.0)


def test_load_shapes(tmp_path):
    save_dataset(tiny(), tmp_path)
    ds = load_dir(tmp_path)
    assert ds.features.shape == (3, 2, 11, 2)
    assert ds.input_names()[:2] == ["f0", "f1"]


def test_synthetic_roundtrip_bitwise(tmp_path):
    ds = generate(SynthConfig(n_stations=4, n_days=6, n_members=3))
    save_dataset(ds, tmp_path)
    back = load_dir(tmp_path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.observations, ds.observations)
    assert np.array_equal(back.yday, ds.yday)
    assert back.stations == ds.stations
    assert back.feature_names == ds.feature_names


def _files(tmp_path):
    return tmp_path / "stations.csv", tmp_path / "forecasts.csv", tmp_path / "observations.csv"


def test_unknown_station_is_alignment_error(tmp_path):
    save_dataset(tiny(), tmp_path)
    st, fc, ob = _files(tmp_path)
    lines = fc.read_text().splitlines()
    lines[1] = "0,999," + lines[1].split(",", 2)[2]
    fc.write_text("\n".join(lines) + "\n")
    with pytest.raises(AlignmentError, match="999"):
        load_dataset(st, fc, ob)


def test_malformed_row_reports_line(tmp_path):
    save_dataset(tiny(), tmp_path)
    st, fc, ob = _files(tmp_path)
    lines = fc.read_text().splitlines()
    parts = lines[4].split(",")
    parts[3] = "abc"
    lines[4] = ",".join(parts)
    fc.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=":5:"):
        load_dataset(st, fc, ob)


def test_inconsistent_member_count_is_schema_error(tmp_path):
    save_dataset(tiny(), tmp_path)
    st, fc, ob = _files(tmp_path)
    lines = fc.read_text().splitlines()
    del lines[5]  # drop one member of the first (day, station)
    fc.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_dataset(st, fc, ob)


def test_missing_observation_is_alignment_error(tmp_path):
    save_dataset(tiny(), tmp_path)
    st, fc, ob = _files(tmp_path)
    lines = ob.read_text().splitlines()
    ob.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(AlignmentError, match="missing observation"):
        load_dataset(st, fc, ob)


def test_missing_column_is_schema_error(tmp_path):
    save_dataset(tiny(), tmp_path)
    st, fc, ob = _files(tmp_path)
    st.write_text("id,lat,lon,alt\n1,50,8,100\n")
    with pytest.raises(SchemaError):
        load_dataset(st, fc, ob)


def test_normalizer_constant_column_clamped():
    x = np.full((10, 1), 5.0)
    with pytest.warns(RuntimeWarning):
        norm = Normalizer.fit(x, ["c"])
    assert norm.mean[0] == 5.0 and norm.std[0] == 1.0
    assert np.all(norm.apply(x) == 0.0)


def test_normalizer_standardized_column_unchanged():
    x = np.array([[-1.0], [1.0]] * 4)
    norm = Normalizer.fit(x, ["c"])
    assert norm.mean[0] == 0.0 and norm.std[0] == 1.0
    assert np.array_equal(norm.apply(x), x)


def test_normalizer_moments_and_inverse():
    rng = np.random.default_rng(3)
    x = rng.normal(3.0, 7.0, size=(500, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        norm = Normalizer.fit(x, list("abcd"))
    z = norm.apply(x)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(z.std(axis=0) - 1) < 1e-10)
    np.testing.assert_allclose(norm.invert(z), x, rtol=1e-12)
    back = Normalizer.from_json(norm.to_json())
    assert np.array_equal(back.apply(x), z)


def test_fit_normalizer_uses_training_days_only():
    ds = tiny(n_days=10)
    ds.features[5:] += 1000.0
    split = SplitSpec(train=(0, 5), valid=(5, 7), test=(7, 10))
    norm = fit_normalizer(ds, split)
    assert abs(norm.mean[0]) < 5
    with pytest.raises(ValueError):
        fit_normalizer(ds, SplitSpec(train=(20, 30), valid=(5, 7), test=(7, 10)))


def test_summarize_members_examples():
    ds = tiny(n_members=2, n_features=1)
    ds.features[0, 0, :, 0] = [2.0, 4.0]
    out = summarize_members(ds)
    assert out.n_members == 1 and out.feature_names == ["f0_mean", "f0_std"]
    assert out.features[0, 0, 0, 0] == 3.0
    assert abs(out.features[0, 0, 0, 1] - 1.4142135623730951) < 1e-15
    single = summarize_members(tiny(n_members=1, n_features=1))
    assert np.all(single.features[..., 1] == 0.0)


def test_summaries_permutation_invariant_exactly():
    ds = generate(SynthConfig(n_stations=3, n_days=5, n_members=11))
    perm = np.random.default_rng(0).permutation(11)
    a = summarize_members(ds).features
    ds.features = ds.features[:, :, perm]
    assert np.array_equal(summarize_members(ds).features, a)
    x = ds.node_inputs()
    assert np.array_equal(summarize_inputs(x, ds.n_features), summarize_inputs(x[:, :, ::-1], ds.n_features))


def test_split_disjoint_and_json(tmp_path):
    with pytest.raises(ValueError):
        SplitSpec(train=(0, 10), valid=(5, 12), test=(12, 20))
    with pytest.raises(ValueError):
        SplitSpec(train=(0, 10), valid=(10, 12), test=(12, 20), label="X")
    s = SplitSpec(train=(0, 10), valid=(10, 12), test=(12, 20), label="R2F")
    save_split(s, tmp_path / "s.json")
    assert load_split(tmp_path / "s.json") == s
    assert s.sizes(tiny(n_days=15)) == {"train": 10, "valid": 2, "test": 3}


def test_dataset_rejects_missing_entries():
    ds = tiny()
    feats = ds.features.copy()
    feats[0, 0, 0, 0] = np.nan
    with pytest.raises(SchemaError):
        ForecastDataset(ds.stations, ds.days, ds.feature_names, feats, ds.yday, ds.observations)
