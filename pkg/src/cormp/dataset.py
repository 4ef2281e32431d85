"""Demonstration dataset: construction and a byte-reproducible directory format.

Directory layout::

    header.json          world config, seed, split, normalisation statistics
    contexts.csv         per-demo corridor offset, object x after correction, kind
    test_contexts.csv    the 25 stratified unseen scenes
    demos/demo_NNN.csv   phase,t,x,y,z rows for the three phases
    images/demo_NNN_{pre,cor}.pgm
"""
from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import demonstrator as dm
from . import sim
from .errors import DataError
from .normalization import MinMax, ZScore
from .trajectory import Trajectory

DATASET_FORMAT = "cormp-dataset"
DATASET_VERSION = 1


@dataclass
class Dataset:
    demos: list
    seed: int
    config: sim.WorldConfig = field(default_factory=sim.WorldConfig)
    test_scenes: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    @property
    def train_indices(self):
        return self.header["split"]["train"]

    @property
    def validation_indices(self):
        return self.header["split"]["validation"]

    @property
    def train(self):
        return [self.demos[i] for i in self.train_indices]

    @property
    def validation(self):
        return [self.demos[i] for i in self.validation_indices]

    @property
    def n_images(self):
        return 2 * len(self.demos)

    def images(self):
        return np.stack([img for d in self.demos for img in d.images])

    def stats(self, name):
        data = self.header["normalization"][name]
        return MinMax.from_dict(data) if "lo" in data else ZScore.from_dict(data)

    @property
    def fingerprint(self):
        return hashlib.sha256(_header_bytes(self.header)).hexdigest()


def cor_relative(demo):
    """Correction trajectory expressed relative to the gripper at the critical point."""
    return demo.cor.values - demo.cor.values[0]


def phase_values(demo, phase):
    if phase == "pre":
        return demo.pre.values
    if phase == "cor":
        return cor_relative(demo)
    if phase == "post":
        return demo.post.values
    return demo.full.values


def _normalization(train):
    stats = {p: ZScore.fit([phase_values(d, p) for d in train]).to_dict()
             for p in ("pre", "cor", "post", "full")}
    stats["context_corridor"] = MinMax.fit([[d.context_corridor] for d in train]).to_dict()
    stats["context_object"] = MinMax.fit([[d.context_object] for d in train]).to_dict()
    return stats


def make_header(demos, seed, config, n_points):
    n = len(demos)
    n_train = n // 2 if n > 1 else 1
    train, validation = list(range(n_train)), list(range(n_train, n))
    return {
        "format": DATASET_FORMAT,
        "format_version": DATASET_VERSION,
        "seed": int(seed),
        "n_demos": n,
        "n_points": n_points,
        "world_config": config.to_dict(),
        "split": {"train": train, "validation": validation},
        "normalization": _normalization([demos[i] for i in train]),
    }


def build_dataset(n=200, seed=0, config=sim.WorldConfig(), n_points=dm.N_POINTS, with_tests=True):
    """Sample, demonstrate and render ``n`` scenes plus the unseen test suite.

    The first half of the demonstrations is the training split; normalisation
    statistics come from it alone.
    """
    rng = np.random.default_rng([seed, 0])
    demos = dm.collect(n, rng, config, n_points)
    header = make_header(demos, seed, config, n_points)
    tests = []
    if with_tests:
        tests = dm.build_test_scenes(np.random.default_rng([seed, 1]),
                                     [d.context_corridor for d in demos], config)
    return Dataset(demos, seed, config, tests, header)


# -- on-disk format ------------------------------------------------------------

def _header_bytes(header):
    return (json.dumps(header, indent=1, sort_keys=True) + "\n").encode()


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path):
    raw = Path(path).read_bytes()
    head = _PGM_HEADER.match(raw)
    if head is None:
        raise DataError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(v) for v in head.groups())
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pixels = raw[head.end():]
    if len(pixels) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def _fmt(v):
    return repr(float(v))


def save_dataset(dataset, out_dir):
    out = Path(out_dir)
    (out / "demos").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "header.json").write_bytes(_header_bytes(dataset.header))
    with open(out / "contexts.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["demo", "corridor_offset", "object_x_after_correction", "correction_kind"])
        for i, d in enumerate(dataset.demos):
            writer.writerow([i, _fmt(d.context_corridor), _fmt(d.context_object), d.correction_kind])
    with open(out / "test_contexts.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial", "corridor_offset", "expected_kind"])
        for i, s in enumerate(dataset.test_scenes):
            kind = dm.correction_kind(s.corridor_offset, dataset.config.dead_band)
            writer.writerow([i, _fmt(s.corridor_offset), kind])
    for i, d in enumerate(dataset.demos):
        with open(out / "demos" / f"demo_{i:03d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["phase", "t", "x", "y", "z"])
            for traj in (d.pre, d.cor, d.post):
                for t, row in zip(traj.t, traj.values):
                    writer.writerow([traj.phase, _fmt(t)] + [_fmt(v) for v in row])
        write_pgm(out / "images" / f"demo_{i:03d}_pre.pgm", d.images[0])
        write_pgm(out / "images" / f"demo_{i:03d}_cor.pgm", d.images[1])


def read_test_contexts(path, config=sim.WorldConfig()):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"test context file {path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [sim.initial_state(float(r["corridor_offset"]), config) for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed test context file ({exc})") from None


def load_dataset(path):
    root = Path(path)
    header_path = root / "header.json"
    if not header_path.is_file():
        raise DataError(f"{root} is not a dataset directory (missing header.json)")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{header_path}: invalid JSON ({exc})") from None
    if header.get("format") != DATASET_FORMAT or header.get("format_version") != DATASET_VERSION:
        raise DataError(
            f"{root}: dataset format {header.get('format')!r} v{header.get('format_version')!r} "
            f"is not {DATASET_FORMAT} v{DATASET_VERSION}")
    config = sim.WorldConfig.from_dict(header["world_config"])
    with open(root / "contexts.csv", newline="") as fh:
        ctx_rows = list(csv.DictReader(fh))
    if len(ctx_rows) != header["n_demos"]:
        raise DataError(f"{root}: contexts.csv has {len(ctx_rows)} rows, header says {header['n_demos']}")
    demos = []
    for i, row in enumerate(ctx_rows):
        phases = {"pre": ([], []), "cor": ([], []), "post": ([], [])}
        try:
            with open(root / "demos" / f"demo_{i:03d}.csv", newline="") as fh:
                for rec in csv.DictReader(fh):
                    ts, vs = phases[rec["phase"]]
                    ts.append(float(rec["t"]))
                    vs.append([float(rec["x"]), float(rec["y"]), float(rec["z"])])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{root}: cannot read demonstration {i} ({exc})") from None
        trajs = [Trajectory(np.array(ts), np.array(vs), p) for p, (ts, vs) in phases.items()]
        images = (read_pgm(root / "images" / f"demo_{i:03d}_pre.pgm"),
                  read_pgm(root / "images" / f"demo_{i:03d}_cor.pgm"))
        offset = float(row["corridor_offset"])
        demos.append(dm.Demonstration(*trajs, offset, float(row["object_x_after_correction"]),
                                      images, row["correction_kind"],
                                      sim.initial_state(offset, config)))
    tests = []
    if (root / "test_contexts.csv").is_file():
        tests = read_test_contexts(root / "test_contexts.csv", config)
    return Dataset(demos, header["seed"], config, tests, header)


def dataset_fingerprint(path):
    return hashlib.sha256((Path(path) / "header.json").read_bytes()).hexdigest()
