"""Dataset assembly on disk.

Layout under a data directory::

    images/<id>.pgm            128x128 greyscale flow images
    manifest.csv               id,file,label,provenance,split,seed
    manifest_augmented.csv     the same plus synthetic training images
    geometry.csv               one row per simulated geometry (accepted or not)

Every sample has its own seed, so a base dataset is a pure function of the
root seed regardless of how the simulations are scheduled.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLASSES, flowsim, pgm
from .errors import (ContractError, DegenerateSampleError, MissingArtifactError, ParseError,
                     SimulationEnvironmentError)
from .gan import synthesize_class
from .tensor import Rng

BASE_COUNTS = {"left": 45, "right": 113, "both": 137}
TARGET_PER_CLASS = 400
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.70, 0.15, 0.15)
PROVENANCES = ("real_proxy", "synthetic")
MANIFEST_HEADER = "id,file,label,provenance,split,seed"
GEOMETRY_HEADER = "id,label,severity_left,severity_right,position,angle,width,seed,converged,iterations"
MAX_FAILURE_RATE = 0.2
IMAGE_SHAPE = (flowsim.IMAGE, flowsim.IMAGE)


@dataclass(frozen=True)
class Entry:
    id: str
    file: str
    label: str
    provenance: str
    split: str
    seed: int

    def row(self):
        return f"{self.id},{self.file},{self.label},{self.provenance},{self.split},{self.seed}"


class Manifest:
    """Ordered list of dataset entries with unique ids."""

    def __init__(self, entries=()):
        self.entries = list(entries)
        self.validate()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.entries == other.entries

    def validate(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ContractError(f"duplicate id {e.id}")
            seen.add(e.id)
            if e.provenance == "synthetic" and e.split != "train":
                raise ContractError(f"synthetic entry {e.id} assigned to split {e.split}")

    def select(self, split=None, provenance=None, label=None):
        return [e for e in self.entries
                if (split is None or e.split == split)
                and (provenance is None or e.provenance == provenance)
                and (label is None or e.label == label)]

    def counts(self, split=None, provenance=None):
        """Per-class counts as a dict in class order."""
        return {c: len(self.select(split, provenance, c)) for c in CLASSES}

    def to_csv(self):
        return "".join(line + "\n" for line in [MANIFEST_HEADER] + [e.row() for e in self.entries])

    @classmethod
    def from_csv(cls, text, source="<manifest>"):
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise ParseError(f"{source}: line 1: expected header {MANIFEST_HEADER!r}")
        entries, seen = [], set()
        for lineno, line in enumerate(lines[1:], start=2):
            fields = line.split(",")
            if len(fields) != 6:
                raise ParseError(f"{source}: line {lineno}: expected 6 fields, found {len(fields)}")
            id_, file, label, provenance, split, seed = fields
            if not id_.isalnum():
                raise ParseError(f"{source}: line {lineno}: id {id_!r} is not alphanumeric")
            if id_ in seen:
                raise ParseError(f"{source}: line {lineno}: duplicate id {id_!r}")
            if label not in CLASSES:
                raise ParseError(f"{source}: line {lineno}: unknown label {label!r}")
            if provenance not in PROVENANCES:
                raise ParseError(f"{source}: line {lineno}: unknown provenance {provenance!r}")
            if split not in SPLITS:
                raise ParseError(f"{source}: line {lineno}: unknown split {split!r}")
            if provenance == "synthetic" and split != "train":
                raise ParseError(f"{source}: line {lineno}: synthetic entry in split {split!r}")
            try:
                seed = int(seed)
            except ValueError:
                raise ParseError(f"{source}: line {lineno}: seed {seed!r} is not an integer") from None
            seen.add(id_)
            entries.append(Entry(id_, file, label, provenance, split, seed))
        return cls(entries)

    def save(self, path):
        Path(path).write_bytes(self.to_csv().encode())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"manifest not found: {path}")
        return cls.from_csv(path.read_bytes().decode(), source=str(path))


def split_counts(n, ratios=SPLIT_RATIOS):
    """Largest-remainder apportionment of ``n`` items; ties favour earlier splits."""
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(n, rng, ratios=SPLIT_RATIOS):
    """Split name for each of ``n`` items, stratified by a seeded permutation."""
    out = np.empty(n, dtype=object)
    bounds = np.cumsum([0] + split_counts(n, ratios))
    perm = rng.permutation(n)
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        out[perm[lo:hi]] = name
    return list(out)


def _simulate_one(task):
    label, seed, cfg = task
    geom = flowsim.build_geometry(label, Rng(seed))
    field = flowsim.solve_flow(geom, cfg)
    image = None
    if field.converged:
        try:
            image = flowsim.render_image(field, geom)
        except DegenerateSampleError:
            image = None
    return geom, field.converged and image is not None, field.iterations, image


def _geometry_row(id_, geom, seed, converged, iterations):
    return (f"{id_},{geom.label},{geom.severity_left:.6f},{geom.severity_right:.6f},{geom.position:.6f},"
            f"{geom.angle:.6f},{geom.width:.6f},{seed},{int(converged)},{iterations}")


def generate_base(seed, data_dir, cfg=None, counts=None, workers=1, log=None):
    """Simulate the base dataset and write images, manifest.csv and geometry.csv.

    Non-converged samples are replaced by fresh draws for the same slot; more
    than 20% failures raises ``SimulationEnvironmentError``.
    """
    counts = dict(BASE_COUNTS if counts is None else counts)
    cfg = cfg or flowsim.SimConfig()
    data_dir = Path(data_dir)
    (data_dir / "images").mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    slots = [(c, k) for c in CLASSES for k in range(counts.get(c, 0))]
    attempt = {slot: 0 for slot in slots}
    done, geometry_rows = {}, []
    attempts = failures = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        pending = list(slots)
        while pending:
            seeds = [root.spawn(c, k, attempt[(c, k)]).seed for c, k in pending]
            tasks = [(c, s, cfg) for (c, _), s in zip(pending, seeds)]
            results = pool.map(_simulate_one, tasks, chunksize=4) if pool else map(_simulate_one, tasks)
            retry = []
            for (c, k), s, (geom, ok, iters, image) in zip(pending, seeds, results):
                id_ = f"{c}{k:03d}" if ok else f"{c}{k:03d}x{attempt[(c, k)]}"
                geometry_rows.append((c, k, attempt[(c, k)], _geometry_row(id_, geom, s, ok, iters)))
                attempts += 1
                if ok:
                    done[(c, k)] = (s, image)
                else:
                    failures += 1
                    attempt[(c, k)] += 1
                    retry.append((c, k))
                if log:
                    log(f"{id_}: {'ok' if ok else 'not converged'} after {iters} iterations")
            if failures > MAX_FAILURE_RATE * max(attempts, len(slots)):
                raise SimulationEnvironmentError(
                    f"{failures} of {attempts} simulations failed to converge (limit {MAX_FAILURE_RATE:.0%}); "
                    f"check the solver configuration")
            pending = retry
    finally:
        if pool:
            pool.shutdown()

    entries = []
    for c in CLASSES:
        n = counts.get(c, 0)
        splits = assign_splits(n, root.spawn("split", c)) if n else []
        for k in range(n):
            s, image = done[(c, k)]
            id_ = f"{c}{k:03d}"
            rel = f"images/{id_}.pgm"
            pgm.write_image(data_dir / rel, image)
            entries.append(Entry(id_, rel, c, "real_proxy", splits[k], s))
    geometry_rows.sort(key=lambda r: (CLASSES.index(r[0]), r[1], r[2]))
    with open(data_dir / "geometry.csv", "w", newline="\n") as fh:
        fh.write(GEOMETRY_HEADER + "\n" + "".join(r[3] + "\n" for r in geometry_rows))
    manifest = Manifest(entries)
    manifest.save(data_dir / "manifest.csv")
    return manifest


def synthetic_needed(manifest, target=TARGET_PER_CLASS):
    """Synthetic images still required per class for ``target`` total entries."""
    return {c: max(target - n, 0) for c, n in manifest.counts().items()}


def rebalance(manifest, gans, data_dir, seed, target=TARGET_PER_CLASS):
    """Top up each class with synthetic training images to ``target`` entries.

    ``gans`` maps class name to a trained generator.  Existing entries are
    kept; a manifest that is already balanced comes back unchanged.
    """
    data_dir = Path(data_dir)
    (data_dir / "images").mkdir(parents=True, exist_ok=True)
    need = synthetic_needed(manifest, target)
    missing = [c for c in CLASSES if need[c] and c not in gans]
    if missing:
        raise ContractError(f"no trained GAN for class(es) {', '.join(missing)}")
    root = Rng(seed)
    entries = list(manifest.entries)
    for c in CLASSES:
        if not need[c]:
            continue
        start = len(manifest.select(provenance="synthetic", label=c))
        rng = root.spawn("synthetic", c, start)
        for k, tagged in enumerate(synthesize_class(gans[c], c, need[c], rng), start=start):
            id_ = f"{c}syn{k:03d}"
            rel = f"images/{id_}.pgm"
            pgm.write_image(data_dir / rel, tagged.image)
            entries.append(Entry(id_, rel, c, tagged.provenance, "train", rng.seed))
    return Manifest(entries)


def load_arrays(manifest, data_dir, split=None, provenance=None):
    """Stack the selected images as (n, 128, 128) floats with integer labels."""
    data_dir = Path(data_dir)
    chosen = manifest.select(split, provenance)
    X = np.empty((len(chosen),) + IMAGE_SHAPE, dtype=np.float64)
    for i, e in enumerate(chosen):
        path = data_dir / e.file
        if not path.exists():
            raise MissingArtifactError(f"image file not found: {path}")
        X[i] = pgm.read_image(path, IMAGE_SHAPE)
    y = np.array([CLASSES.index(e.label) for e in chosen], dtype=np.int64)
    return X, y


def verify_files(manifest, data_dir):
    """Check that every entry's image exists and parses as a 128x128 PGM."""
    for e in manifest:
        path = Path(data_dir) / e.file
        if not path.exists():
            raise MissingArtifactError(f"image file not found: {path}")
        pgm.read_image(path, IMAGE_SHAPE)


def default_workers():
    return max(1, min(4, os.cpu_count() or 1))
