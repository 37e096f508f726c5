"""
Dataset persistence: one directory per DomainDataset holding a JSON Lines
manifest plus one `.xyz` text file per cloud.

    <dir>/manifest.jsonl
    <dir>/clouds/<sample_id>_input.xyz
    <dir>/clouds/<sample_id>_target.xyz

Floats are written with the shortest round-trip repr, so load(save(ds)) is
bit-exact.
"""

import json
import logging
import os

import numpy as np

from modules.domains import Benchmark, DomainDataset, DomainStyle, SamplePair
from modules.errors import ParseError, ResolutionError, VersionError

logger = logging.getLogger("DatasetStore")

MANIFEST_VERSION = "dgpic-manifest/1"
MANIFEST_NAME = "manifest.jsonl"
CLOUD_DIR = "clouds"


# ==============================
# CLOUD FILES
# ==============================
def write_xyz(path, cloud):
    rows = np.asarray(cloud, dtype=np.float64).tolist()
    with open(path, "w") as f:
        f.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in rows))


def read_xyz(path, n_points=None):
    with open(path, "r") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split(" ")
        if len(parts) != 3:
            raise ParseError(f"expected 3 coordinates, got {len(parts)}", path, lineno)
        try:
            rows.append([float(v) for v in parts])
        except ValueError as e:
            raise ParseError(f"bad float: {e}", path, lineno) from e
    if n_points is not None and len(rows) != n_points:
        raise ParseError(f"expected {n_points} points, found {len(rows)}", path, len(rows))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


# ==============================
# DATASETS
# ==============================
def save_dataset(ds, path):
    os.makedirs(os.path.join(path, CLOUD_DIR), exist_ok=True)
    header = {"format": MANIFEST_VERSION, "domain": ds.domain.to_dict(), "split": ds.split, "count": len(ds)}
    lines = [json.dumps(header, sort_keys=True)]
    for pair in ds.all_pairs():
        input_rel = f"{CLOUD_DIR}/{pair.sample_id}_input.xyz"
        target_rel = f"{CLOUD_DIR}/{pair.sample_id}_target.xyz"
        write_xyz(os.path.join(path, input_rel), pair.input)
        write_xyz(os.path.join(path, target_rel), pair.target)
        lines.append(json.dumps({
            "domain": pair.domain,
            "task": pair.task,
            "split": ds.split,
            "sample_id": pair.sample_id,
            "n_points": int(pair.input.shape[0]),
            "input_path": input_rel,
            "target_path": target_rel,
            "generator_params": pair.params,
        }, sort_keys=True))
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug(f"💾 Saved {len(ds)} pairs of {ds.name}/{ds.split} to {path}")


def _parse_line(manifest, lineno, line):
    try:
        return json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed manifest record: {e.msg}", manifest, lineno, e.colno) from e


def load_dataset(path):
    manifest = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise ResolutionError(f"no manifest at {manifest}", missing_id=manifest)
    with open(manifest, "r") as f:
        text = f.read()
    if not text.endswith("\n"):
        raise ParseError("manifest is truncated (no final newline)", manifest, text.count("\n") + 1)
    lines = text[:-1].split("\n")

    header = _parse_line(manifest, 1, lines[0])
    if header.get("format") != MANIFEST_VERSION:
        raise VersionError(f"manifest format {header.get('format')!r}, expected {MANIFEST_VERSION!r}")
    try:
        ds = DomainDataset(DomainStyle.from_dict(header["domain"]), header["split"])
        count = int(header["count"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad manifest header: {e}", manifest, 1) from e
    if len(lines) - 1 != count:
        raise ParseError(f"manifest is truncated: header declares {count} records, found {len(lines) - 1}",
                         manifest, len(lines))

    for lineno, line in enumerate(lines[1:], start=2):
        rec = _parse_line(manifest, lineno, line)
        try:
            sample_id = int(rec["sample_id"])
            n_points = int(rec["n_points"])
            paths = (os.path.join(path, rec["input_path"]), os.path.join(path, rec["target_path"]))
            task, domain, params = rec["task"], rec["domain"], rec["generator_params"]
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad manifest record: {e}", manifest, lineno) from e
        for p in paths:
            if not os.path.exists(p):
                raise ResolutionError(f"sample {sample_id}: missing cloud file {p}", missing_id=sample_id)
        pair = SamplePair(
            input=read_xyz(paths[0], n_points),
            target=read_xyz(paths[1], n_points),
            domain=domain,
            task=task,
            sample_id=sample_id,
            params=params,
        )
        ds.pairs.setdefault(task, []).append(pair)
    return ds


# ==============================
# CORPUS
# ==============================
def dataset_dir(root, name, split):
    return os.path.join(root, f"{name}__{split}")


def save_benchmark(bench, root):
    for ds in bench.all_datasets():
        save_dataset(ds, dataset_dir(root, ds.name, ds.split))
    logger.info(f"💾 Corpus written to {root}")


def load_benchmark(root, sources, target):
    def load(name, split):
        d = dataset_dir(root, name, split)
        if not os.path.isdir(d):
            raise ResolutionError(f"corpus is missing {name}/{split} at {d}", missing_id=f"{name}__{split}")
        return load_dataset(d)

    return Benchmark(
        source=[load(n, "train") for n in sources],
        source_test=[load(n, "test") for n in sources],
        target=load(target, "test"),
    )
