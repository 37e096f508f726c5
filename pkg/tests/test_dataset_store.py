import json
import os

import numpy as np
import pytest

from modules.dataset_store import (
    MANIFEST_NAME,
    MANIFEST_VERSION,
    dataset_dir,
    load_benchmark,
    load_dataset,
    read_xyz,
    save_benchmark,
    save_dataset,
    write_xyz,
)
from modules.errors import ParseError, ResolutionError, VersionError

from tests.conftest import TINY_BENCH


def assert_same_dataset(a, b):
    assert a.domain == b.domain and a.split == b.split
    assert a.tasks == b.tasks
    for p, q in zip(a.all_pairs(), b.all_pairs()):
        assert (p.sample_id, p.task, p.domain) == (q.sample_id, q.task, q.domain)
        assert np.array_equal(p.input, q.input)
        assert np.array_equal(p.target, q.target)
        assert p.params == q.params


@pytest.fixture
def saved(tmp_path, tiny_benchmark):
    ds = tiny_benchmark.source[0]
    save_dataset(ds, tmp_path / "ds")
    return ds, tmp_path / "ds"


def test_round_trip_bit_exact(saved):
    ds, path = saved
    assert_same_dataset(ds, load_dataset(path))


def test_manifest_header(saved):
    ds, path = saved
    with open(path / MANIFEST_NAME) as f:
        lines = f.read().splitlines()
    header = json.loads(lines[0])
    assert header["format"] == MANIFEST_VERSION
    assert header["split"] == "train"
    assert header["count"] == len(ds)
    assert len(lines) == 1 + len(ds)
    record = json.loads(lines[1])
    for key in ("domain", "task", "split", "sample_id", "n_points", "input_path", "target_path",
                "generator_params"):
        assert key in record


def test_truncated_manifest(saved):
    _, path = saved
    manifest = path / MANIFEST_NAME
    text = manifest.read_text()
    manifest.write_text(text[: len(text) // 2].rstrip("\n"))
    with pytest.raises(ParseError):
        load_dataset(path)


def test_manifest_cut_at_record_boundary(saved):
    ds, path = saved
    manifest = path / MANIFEST_NAME
    lines = manifest.read_text().splitlines()
    manifest.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(ParseError) as err:
        load_dataset(path)
    assert str(len(ds)) in str(err.value)


def test_malformed_record_reports_line(saved):
    _, path = saved
    manifest = path / MANIFEST_NAME
    lines = manifest.read_text().splitlines()
    lines[2] = "{not json"
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_dataset(path)
    assert err.value.line == 3


def test_version_mismatch(saved):
    _, path = saved
    manifest = path / MANIFEST_NAME
    lines = manifest.read_text().splitlines()
    header = json.loads(lines[0])
    header["format"] = "dgpic-manifest/99"
    lines[0] = json.dumps(header)
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(VersionError):
        load_dataset(path)


def test_missing_cloud_names_sample(saved):
    ds, path = saved
    victim = ds.all_pairs()[1]
    os.remove(path / "clouds" / f"{victim.sample_id}_target.xyz")
    with pytest.raises(ResolutionError) as err:
        load_dataset(path)
    assert err.value.missing_id == victim.sample_id


def test_xyz_round_trip(tmp_path, rng):
    cloud = rng.normal(size=(17, 3))
    write_xyz(tmp_path / "c.xyz", cloud)
    assert np.array_equal(read_xyz(tmp_path / "c.xyz", 17), cloud)


def test_xyz_bad_row(tmp_path):
    (tmp_path / "c.xyz").write_text("0.0 1.0 2.0\n0.5 oops 1.0\n")
    with pytest.raises(ParseError) as err:
        read_xyz(tmp_path / "c.xyz")
    assert err.value.line == 2


def test_benchmark_round_trip(tmp_path, tiny_benchmark):
    save_benchmark(tiny_benchmark, tmp_path)
    assert os.path.isdir(dataset_dir(tmp_path, TINY_BENCH.target, "test"))
    loaded = load_benchmark(tmp_path, TINY_BENCH.sources, TINY_BENCH.target)
    for a, b in zip(tiny_benchmark.all_datasets(), loaded.all_datasets()):
        assert_same_dataset(a, b)


def test_benchmark_missing_split(tmp_path):
    with pytest.raises(ResolutionError):
        load_benchmark(tmp_path, TINY_BENCH.sources, TINY_BENCH.target)
