import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hotleg.dataset import (
    ScalerParams,
    ScenarioDataset,
    SplitSpec,
    apply_scaler,
    fit_scaler,
    import_table,
    invert_scaler,
    kfold_indices,
    load_dataset,
    save_dataset,
    split_dataset,
)
from hotleg.errors import (
    CorruptionError,
    DegenerateChannelError,
    IngestionError,
    InvalidArgumentError,
    ShapeError,
)


def toy(m=6, n=5, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([np.arange(n) * 0.01, rng.normal(size=n), np.zeros(n)])
    return ScenarioDataset(coords, rng.uniform(0.63, 0.83, (m, 1)), rng.normal(size=(m, 3, n)))


def pressure_scaler():
    return ScalerParams([0.63], [0.83], [-231.25, 0.0, 0.000875], [132.7, 1.0, 0.019015],
                        [0, 0, 0], [1, 1, 1])


def test_pressure_endpoints_map_to_unit_interval():
    sc = pressure_scaler()
    y = np.array([[-231.25, -49.275, 132.7], [0, 0, 0], [0.000875, 0.000875, 0.019015]])
    s = apply_scaler(y, sc)
    assert s[0, 0] == 0.0 and s[0, 2] == 1.0
    assert s[0, 1] == pytest.approx(0.5, abs=1e-15)
    assert s[2, 0] == 0.0 and s[2, 2] == 1.0


def test_invert_examples():
    sc = pressure_scaler()
    back = invert_scaler(np.array([[0.0, 0.5], [0, 0], [0, 0]]), sc)
    assert back[0, 0] == -231.25
    assert back[0, 1] == pytest.approx(-49.275, rel=1e-14)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=200))
@settings(max_examples=60, deadline=None)
def test_scaler_round_trip(values):
    sc = pressure_scaler()
    y = np.tile(np.asarray(values), (3, 1))
    back = invert_scaler(apply_scaler(y, sc), sc)
    assert np.allclose(back, y, rtol=1e-12, atol=1e-12 * 364)


def test_out_of_range_extrapolates():
    sc = pressure_scaler()
    s = apply_scaler(np.array([[-600.0], [2.0], [0.05]]), sc)
    assert s[0, 0] < 0 and s[1, 0] > 1 and s[2, 0] > 1


def test_fit_scaler_uses_train_only():
    ds = toy()
    sc = fit_scaler(ds, [0, 1, 2])
    y = ds.fields[[0, 1, 2]]
    assert np.array_equal(sc.field_min, y.min(axis=(0, 2)))
    assert np.array_equal(sc.field_max, y.max(axis=(0, 2)))
    s = sc.scale_fields(y)
    assert np.isclose(s.min(), 0.0) and np.isclose(s.max(), 1.0)


def test_fit_scaler_constant_channel():
    ds = toy()
    ds.fields[:, 1, :] = 3.0
    with pytest.raises(DegenerateChannelError, match="V_o"):
        fit_scaler(ds)


def test_constant_coordinate_axis_is_shifted_only():
    ds = toy()
    sc = fit_scaler(ds)
    c = sc.scale_coords(ds.coords)
    assert np.all(c[:, 2] == 0.0)
    assert np.allclose(sc.unscale_coords(c), ds.coords)


def test_scaler_dict_round_trip():
    sc = fit_scaler(toy())
    again = ScalerParams.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert all(np.array_equal(getattr(sc, k), getattr(again, k)) for k in sc.to_dict())


def test_dataset_validation():
    ds = toy()
    with pytest.raises(ShapeError):
        ScenarioDataset(ds.coords, ds.inputs, ds.fields[:, :2])
    dup = ds.coords.copy()
    dup[1] = dup[0]
    with pytest.raises(InvalidArgumentError):
        ScenarioDataset(dup, ds.inputs, ds.fields)
    bad = ds.fields.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidArgumentError):
        ScenarioDataset(ds.coords, ds.inputs, bad)


def test_split_examples():
    tr, te = split_dataset(5000, SplitSpec(0.8, 0))
    assert (tr.size, te.size) == (4000, 1000)
    tr, te = split_dataset(10, SplitSpec(0.7, 3))
    assert (tr.size, te.size) == (7, 3)
    assert not set(tr) & set(te) and set(tr) | set(te) == set(range(10))


def test_split_deterministic():
    a = split_dataset(100, SplitSpec(0.8, 42))
    b = split_dataset(100, SplitSpec(0.8, 42))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.2, 1.5])
def test_split_rejects_bad_fraction(frac):
    with pytest.raises(InvalidArgumentError):
        SplitSpec(frac)


def test_kfold_partition():
    pairs = kfold_indices(np.arange(4000), 5, seed=0)
    vals = [v for _, v in pairs]
    assert [v.size for v in vals] == [800] * 5
    assert np.array_equal(np.sort(np.concatenate(vals)), np.arange(4000))
    for tr, va in pairs:
        assert not set(tr) & set(va) and tr.size + va.size == 4000


def test_kfold_remainder_and_guard():
    pairs = kfold_indices([7, 8, 9], 2, seed=1)
    assert sorted(v.size for _, v in pairs) == [1, 2]
    with pytest.raises(InvalidArgumentError):
        kfold_indices([1, 2], 3, seed=0)


def test_take_records_partition():
    ds = toy()
    part = ds.take([1, 3], role="test")
    assert part.role == "test" and part.n_scenarios == 2
    assert part.meta["parent_indices"] == [1, 3]
    assert part.meta["parent_sha256"] == ds.fingerprint()


def test_subsample_every_fourth_node():
    ds = toy(n=12)
    sub = ds.subsample_nodes(4)
    assert sub.n_points == 3
    assert np.array_equal(sub.fields[:, :, 0], ds.fields[:, :, 0])


def test_save_load_round_trip(tmp_path):
    ds = toy()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.allclose(back.fields, ds.fields, rtol=1e-6, atol=1e-7)
    assert back.fingerprint() == ds.fingerprint()
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["parameter_order"] == ["P", "V_o", "k"]
    assert manifest["endianness"] == "little" and manifest["dtype"] == "float32"


def test_load_detects_edited_checksum(tmp_path):
    save_dataset(toy(), tmp_path / "d")
    mpath = tmp_path / "d" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["files"]["fields"]["sha256"] = "0" * 64
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError, match="checksum"):
        load_dataset(tmp_path / "d")


def test_load_detects_truncated_blob(tmp_path):
    save_dataset(toy(), tmp_path / "d")
    blob = tmp_path / "d" / "fields.f32le"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        load_dataset(tmp_path / "d")


def test_load_missing_manifest(tmp_path):
    with pytest.raises(CorruptionError):
        load_dataset(tmp_path)


def write_table(path, rows, sep=","):
    header = ["scenario", "v_in", "x", "y", "z", "P", "V_o", "k"]
    path.write_text("\n".join(sep.join(map(str, r)) for r in [header] + rows) + "\n")
    return path


def toy_rows(drop=None):
    rows = []
    for sid, v in (("a", 0.7), ("b", 0.8)):
        for j, (x, y) in enumerate([(0.0, 0.0), (0.1, 0.0), (0.0, 0.1)]):
            if (sid, j) == drop:
                continue
            rows.append([sid, v, x, y, 0.0, 10 * v + j, v, 0.001 * (j + 1)])
    return rows


def test_import_toy_table(tmp_path):
    ds = import_table(write_table(tmp_path / "t.csv", toy_rows()))
    assert (ds.n_scenarios, ds.n_points) == (2, 3)
    assert ds.inputs[:, 0].tolist() == [0.7, 0.8]
    # canonical order sorts by x, then y
    assert ds.coords[:, :2].tolist() == [[0.0, 0.0], [0.0, 0.1], [0.1, 0.0]]


def test_import_tab_delimited(tmp_path):
    ds = import_table(write_table(tmp_path / "t.tsv", toy_rows(), sep="\t"))
    assert ds.n_points == 3


def test_import_missing_node_names_scenario(tmp_path):
    with pytest.raises(IngestionError, match="b"):
        import_table(write_table(tmp_path / "t.csv", toy_rows(drop=("b", 1))))


def test_import_duplicate_coordinate(tmp_path):
    rows = toy_rows()
    rows.append(list(rows[0]))
    with pytest.raises(IngestionError, match="duplicate"):
        import_table(write_table(tmp_path / "t.csv", rows))


def test_import_missing_column(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("scenario,v_in,x,y,z,P,V_o\n")
    with pytest.raises(IngestionError, match="k"):
        import_table(path)
