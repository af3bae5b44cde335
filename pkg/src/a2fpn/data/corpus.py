"""Train/val/test corpora on disk with a tab-separated manifest."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import ConfigurationError, DataError
from .raster import read_image, read_labels, write_image, write_labels
from .synth import SceneSpec, generate_scene

SPLITS = ("train", "val", "test")
DEFAULT_COUNTS = (200, 20, 80)
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class CorpusEntry:
    split: str
    seed: int
    image_path: str
    label_path: str


@dataclass
class Corpus:
    root: Path
    entries: List[CorpusEntry]

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def split(self, name: str) -> List[CorpusEntry]:
        return [e for e in self.entries if e.split == name]

    def checksum(self) -> str:
        """SHA-256 over the manifest bytes and every referenced file, in manifest order."""
        h = hashlib.sha256(self.manifest_path.read_bytes())
        for e in self.entries:
            for rel in (e.image_path, e.label_path):
                h.update((self.root / rel).read_bytes())
        return h.hexdigest()

    def load(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        items = self.split(split)
        if not items:
            raise DataError(f"corpus at {self.root} has no {split!r} entries")
        images = np.stack([read_image(self.root / e.image_path) for e in items])
        labels = np.stack([read_labels(self.root / e.label_path) for e in items])
        return images, labels


def seed_ranges(base_seed: int, counts=DEFAULT_COUNTS) -> Dict[str, Tuple[int, int]]:
    ranges, start = {}, base_seed
    for name, n in zip(SPLITS, counts):
        ranges[name] = (start, start + n)
        start += n
    return ranges


def _validate_ranges(ranges: Dict[str, Tuple[int, int]]) -> None:
    spans = sorted((lo, hi, name) for name, (lo, hi) in ranges.items())
    for lo, hi, name in spans:
        if hi - lo < 1:
            raise ConfigurationError(f"split {name!r} needs at least one seed, got [{lo}, {hi})")
    for (lo_a, hi_a, a), (lo_b, _, b) in zip(spans, spans[1:]):
        if lo_b < hi_a:
            raise ConfigurationError(f"seed ranges of {a!r} and {b!r} overlap")


def make_corpus(
    out_dir,
    base_seed: int = 0,
    counts=DEFAULT_COUNTS,
    size: int = 64,
    num_classes: int = 4,
    noise_sigma: float = 0.05,
    ranges: Optional[Dict[str, Tuple[int, int]]] = None,
) -> Corpus:
    """Generate every scene of every split and write images, labels and the manifest."""
    if ranges is None:
        if len(counts) != 3 or min(counts) < 1:
            raise ConfigurationError(f"counts must be three positive integers, got {counts}")
        ranges = seed_ranges(base_seed, counts)
    _validate_ranges(ranges)
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for split in SPLITS:
        lo, hi = ranges[split]
        for seed in range(lo, hi):
            image, labels = generate_scene(
                SceneSpec(seed=seed, size=size, num_classes=num_classes, noise_sigma=noise_sigma)
            )
            entry = CorpusEntry(split, seed, f"images/{split}_{seed}.ppm", f"labels/{split}_{seed}.pgm")
            write_image(root / entry.image_path, image)
            write_labels(root / entry.label_path, labels)
            entries.append(entry)
    corpus = Corpus(root, entries)
    write_manifest(corpus)
    return corpus


def write_manifest(corpus: Corpus) -> None:
    lines = [f"{e.split}\t{e.seed}\t{e.image_path}\t{e.label_path}\n" for e in corpus.entries]
    with open(corpus.manifest_path, "w", newline="\n") as fh:
        fh.writelines(lines)


def read_manifest(path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no corpus manifest at {path}")
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[0] not in SPLITS:
                raise DataError(f"{path}:{lineno}: malformed manifest line")
            entries.append(CorpusEntry(parts[0], int(parts[1]), parts[2], parts[3]))
    return Corpus(path.parent, entries)


def regenerate(corpus: Corpus, out_dir, size: int = 64, num_classes: int = 4, noise_sigma: float = 0.05) -> Corpus:
    """Rebuild a corpus elsewhere from a manifest's (split, seed) list."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for e in corpus.entries:
        image, labels = generate_scene(
            SceneSpec(seed=e.seed, size=size, num_classes=num_classes, noise_sigma=noise_sigma)
        )
        write_image(root / e.image_path, image)
        write_labels(root / e.label_path, labels)
    out = Corpus(root, list(corpus.entries))
    write_manifest(out)
    return out


def ensure_dir_writable(path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"output directory {root} is not writable")
