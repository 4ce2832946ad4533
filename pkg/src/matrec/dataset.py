"""Dataset ingestion, count verification, stratified splits, outlier attachment.

Layout on disk: root/<class-name>/*.jpg|png, one directory per material
class named exactly as in the catalog. Splits are stratified per class
with round-to-nearest test/val sizes and are a pure function of
(manifest, seed): two processes write byte-identical split files.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .catalog import ClassCatalog
from .jsonio import (digest_of, file_sha256, read_json, short_hash64,
                     write_canonical_json)
from .rng import stream_rng

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
MIN_DATASET_SIDE = 224  # dataset originals are high-resolution


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: str           # relative to the scanned root (posix separators)
    class_index: int
    width: int
    height: int
    bytes_hash: str     # full sha256 hex
    bytes_hash64: str   # 64-bit truncation, compact drift check

    @property
    def record_id(self) -> str:
        return self.path

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "class_index": self.class_index,
            "width": self.width,
            "height": self.height,
            "bytes_hash": self.bytes_hash,
            "bytes_hash64": self.bytes_hash64,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            path=d["path"],
            class_index=int(d["class_index"]),
            width=int(d["width"]),
            height=int(d["height"]),
            bytes_hash=d["bytes_hash"],
            bytes_hash64=d["bytes_hash64"],
        )


@dataclass
class DatasetManifest:
    root: str
    catalog: ClassCatalog
    records: list = field(default_factory=list)      # list[ImageRecord], sorted by path
    skipped: list = field(default_factory=list)      # list[{"path", "reason"}]

    @property
    def per_class_counts(self) -> dict:
        counts = {name: 0 for name in self.catalog.materials}
        for rec in self.records:
            counts[self.catalog.name_of(rec.class_index)] += 1
        return counts

    def record_by_id(self, record_id: str) -> ImageRecord:
        rec = self._index().get(record_id)
        if rec is None:
            raise DatasetError(f"unknown record id: {record_id!r}")
        return rec

    def _index(self) -> dict:
        if not hasattr(self, "_idx") or len(self._idx) != len(self.records):
            self._idx = {r.record_id: r for r in self.records}
        return self._idx

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "catalog": self.catalog.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "skipped": list(self.skipped),
            "per_class_counts": self.per_class_counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            root=d["root"],
            catalog=ClassCatalog.from_dict(d["catalog"]),
            records=[ImageRecord.from_dict(r) for r in d["records"]],
            skipped=list(d.get("skipped", [])),
        )

    def digest(self) -> str:
        return digest_of(self.to_dict())

    def save(self, path):
        write_canonical_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(read_json(path))


def _probe_image(path: Path):
    """(width, height) if the file decodes, else raises."""
    with Image.open(path) as im:
        im.load()
        return im.size  # (width, height)


def _scan_one(root: Path, rel: str, class_index: int, min_side: int):
    path = root / rel
    try:
        width, height = _probe_image(path)
    except Exception as exc:
        return None, {"path": rel, "reason": f"undecodable: {exc}"}
    if width < min_side or height < min_side:
        return None, {"path": rel, "reason": f"smaller than {min_side}px: {width}x{height}"}
    full = file_sha256(path)
    rec = ImageRecord(
        path=rel,
        class_index=class_index,
        width=width,
        height=height,
        bytes_hash=full,
        bytes_hash64=short_hash64(full),
    )
    return rec, None


def scan_dataset(root, catalog: ClassCatalog, workers: int = 4,
                 min_side: int = MIN_DATASET_SIDE) -> DatasetManifest:
    """Walk root/<class>/* and build a manifest.

    Missing class directories are fatal; undecodable or undersized files
    go to the skip list. Hashing runs on a worker pool but records are
    order-canonicalized (sorted by path) so the result is independent of
    worker count.
    """
    root = Path(root)
    jobs = []
    for name in catalog.materials:
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetError(f"missing class directory: {name!r} under {root}")
        class_index = catalog.index_of(name)
        for p in sorted(class_dir.iterdir()):
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
                rel = f"{name}/{p.name}"
                jobs.append((rel, class_index))

    records, skipped = [], []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for rec, skip in pool.map(
                lambda j: _scan_one(root, j[0], j[1], min_side), jobs):
            if rec is not None:
                records.append(rec)
            else:
                skipped.append(skip)

    records.sort(key=lambda r: r.path)
    skipped.sort(key=lambda s: s["path"])
    return DatasetManifest(root=str(root), catalog=catalog,
                           records=records, skipped=skipped)


def verify_counts(manifest: DatasetManifest, expected: dict) -> dict:
    """Compare manifest per-class counts against an expected map.

    Report-only: returns {"passed", "total_found", "total_expected",
    "per_class": [{class, expected, found, delta}...], "unexpected": [...]}.
    """
    found = manifest.per_class_counts
    per_class = []
    for name in sorted(expected):
        f = found.get(name, 0)
        per_class.append({
            "class": name,
            "expected": int(expected[name]),
            "found": f,
            "delta": f - int(expected[name]),
        })
    unexpected = sorted(name for name, n in found.items()
                        if name not in expected and n > 0)
    passed = all(row["delta"] == 0 for row in per_class) and not unexpected
    return {
        "passed": passed,
        "total_found": sum(found.values()),
        "total_expected": sum(int(v) for v in expected.values()),
        "per_class": per_class,
        "unexpected": unexpected,
    }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SplitManifest:
    train: list                      # record ids
    val: list
    test: list
    split_config: dict               # {"fractions": [...], "seed": int}
    manifest_digest: str
    outlier_records: list = field(default_factory=list)  # full record dicts, train-only

    def split_of(self, record_id: str) -> str:
        if record_id in set(self.train):
            return "train"
        if record_id in set(self.val):
            return "val"
        if record_id in set(self.test):
            return "test"
        raise DatasetError(f"record id not in any split: {record_id!r}")

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "split_config": dict(self.split_config),
            "manifest_digest": self.manifest_digest,
            "outlier_records": [dict(r) for r in self.outlier_records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            train=list(d["train"]),
            val=list(d["val"]),
            test=list(d["test"]),
            split_config=dict(d["split_config"]),
            manifest_digest=d["manifest_digest"],
            outlier_records=[dict(r) for r in d.get("outlier_records", [])],
        )

    def digest(self) -> str:
        return digest_of(self.to_dict())

    def save(self, path):
        write_canonical_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(read_json(path))


DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


def make_splits(manifest: DatasetManifest,
                fractions=DEFAULT_FRACTIONS,
                seed: int = 0) -> SplitManifest:
    """Deterministic stratified train/val/test partition.

    Per class: test = round(test_frac*n), val = round(val_frac*n),
    train = remainder, after a seed-determined shuffle of that class's
    records. Rounding is half-up so sizes are platform-independent.
    """
    train_f, val_f, test_f = fractions
    if abs(train_f + val_f + test_f - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {fractions}")

    by_class = {}
    for rec in manifest.records:
        by_class.setdefault(rec.class_index, []).append(rec.record_id)

    train, val, test = [], [], []
    for class_index in sorted(by_class):
        ids = sorted(by_class[class_index])
        n = len(ids)
        if n < 3:
            name = manifest.catalog.name_of(class_index)
            raise DatasetError(
                f"class {name!r} has only {n} records; need at least 3")
        rng = stream_rng(seed, f"split:{class_index}")
        perm = rng.permutation(n)
        shuffled = [ids[i] for i in perm]
        n_test = _round_half_up(test_f * n)
        n_val = _round_half_up(val_f * n)
        if n_test + n_val >= n:
            name = manifest.catalog.name_of(class_index)
            raise DatasetError(f"class {name!r} too small for fractions {fractions}")
        test.extend(shuffled[:n_test])
        val.extend(shuffled[n_test:n_test + n_val])
        train.extend(shuffled[n_test + n_val:])

    return SplitManifest(
        train=sorted(train),
        val=sorted(val),
        test=sorted(test),
        split_config={"fractions": list(fractions), "seed": int(seed)},
        manifest_digest=manifest.digest(),
    )


def attach_outliers(splits: SplitManifest, outlier_dir,
                    catalog: ClassCatalog, workers: int = 4) -> SplitManifest:
    """Append every image under outlier_dir to train with the outlier label.

    Validation and test are untouched; outlier ids are namespaced under
    "outlier/" so they can never collide with dataset record ids.
    """
    if not catalog.has_outlier:
        raise DatasetError("no outlier class configured in catalog")
    outlier_dir = Path(outlier_dir)
    files = sorted(p for p in outlier_dir.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES) \
        if outlier_dir.is_dir() else []
    if not files:
        raise DatasetError(f"outlier directory empty or missing: {outlier_dir}")

    outlier_index = catalog.outlier_index
    records = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for rec, skip in pool.map(
                lambda p: _scan_one(outlier_dir, p.name, outlier_index, 1), files):
            if rec is not None:
                d = rec.to_dict()
                d["path"] = f"outlier/{d['path']}"
                d["source_dir"] = str(outlier_dir)
                records.append(d)
    records.sort(key=lambda d: d["path"])

    return SplitManifest(
        train=sorted(list(splits.train) + [d["path"] for d in records]),
        val=list(splits.val),
        test=list(splits.test),
        split_config=dict(splits.split_config),
        manifest_digest=splits.manifest_digest,
        outlier_records=records,
    )
