"""Head training loop over streamed backbone features, plus checkpointing.

The backbone stays frozen: every epoch streams augmented images through it
and trains only the head. An optional feature cache pre-materializes K
augmented variants per image and cycles them, trading faithfulness to
fresh per-epoch augmentation for CPU time.
"""

import copy
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, batch_stream
from .backbone import flatten_features
from .catalog import ClassCatalog
from .dataset import DatasetManifest, SplitManifest
from .head import Head, HeadSpec
from .jsonio import canonical_dumps, read_json
from .optim import Adam
from .rng import stream_rng


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3              # 1e-4 is the default for the wide vgg16 head
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10            # early stop on validation accuracy
    seed: int = 0
    cache_variants: int = 0       # 0 = recompute features every epoch
    workers: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainError("lr must be > 0")
        if self.patience < 1:
            raise TrainError("patience must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "seed": self.seed, "cache_variants": self.cache_variants,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0            # 1-based
    diverged: bool = False

    def to_dict(self) -> dict:
        return {"epochs": list(self.epochs), "best_epoch": self.best_epoch,
                "diverged": self.diverged}


def partition_samples(manifest: DatasetManifest, splits: SplitManifest,
                      which: str) -> list:
    """Canonical-order {"id", "path", "label"} list for one partition."""
    ids = {"train": splits.train, "val": splits.val, "test": splits.test}[which]
    outlier_map = {d["path"]: d for d in splits.outlier_records}
    out = []
    for rid in ids:
        if rid in outlier_map:
            d = outlier_map[rid]
            path = Path(d["source_dir"]) / rid.split("/", 1)[1]
            label = d["class_index"]
        else:
            rec = manifest.record_by_id(rid)
            path = Path(manifest.root) / rec.path
            label = rec.class_index
        out.append({"id": rid, "path": str(path), "label": int(label)})
    return out


def features_for_samples(samples, backbone, batch_size=32, augment_cfg=None,
                         seed=0, epoch=0, augment_on=False, workers=1):
    """Flattened feature matrix + label vector for a whole partition."""
    cfg = augment_cfg or AugmentConfig(input_side=backbone.spec.input_side)
    feats, labels = [], []
    for tensors, batch_labels in batch_stream(
            samples, batch_size, seed, epoch, augment_on=augment_on,
            config=cfg, workers=workers):
        feats.append(flatten_features(backbone.extract(tensors)))
        labels.append(batch_labels)
    return np.concatenate(feats), np.concatenate(labels)


def _accuracy(probs, labels) -> float:
    return float(np.mean(probs.argmax(axis=1) == labels))


def train_head(head_spec: HeadSpec, backbone, manifest: DatasetManifest,
               splits: SplitManifest, augment_cfg: AugmentConfig,
               cfg: TrainConfig, augment_on: bool = True,
               log=None):
    """Train the head; returns (best Head, TrainHistory).

    Fully reproducible for a given config seed: augmentation streams,
    dropout masks and initialization all derive from it.
    """
    train_samples = partition_samples(manifest, splits, "train")
    val_samples = partition_samples(manifest, splits, "val")
    if not train_samples or not val_samples:
        raise TrainError("empty train or val partition")

    head = Head.build(head_spec, seed=cfg.seed)
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    dropout_rng = stream_rng(cfg.seed, "dropout")

    val_X, val_y = features_for_samples(
        val_samples, backbone, cfg.batch_size, augment_cfg,
        seed=cfg.seed, augment_on=False, workers=cfg.workers)

    cache = {}
    history = TrainHistory()
    best_val_acc = -1.0
    best_params = None
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        losses, hits, total = [], 0, 0
        try:
            for X, y in _epoch_feature_batches(
                    train_samples, backbone, augment_cfg, cfg,
                    epoch - 1, augment_on, cache):
                loss, grads = head.loss_and_grad(X, y, rng=dropout_rng)
                opt.step(head.params, grads)
                losses.append(loss * len(y))
                probs, _ = head.forward(X, mode="infer")
                hits += int(np.sum(probs.argmax(axis=1) == y))
                total += len(y)
        except Exception as exc:
            if "non-finite" in str(exc):
                history.diverged = True
                break
            raise

        val_probs, _ = head.forward(val_X, mode="infer")
        picked = np.clip(val_probs[np.arange(len(val_y)), val_y], 1e-12, None)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / total),
            "train_acc": hits / total,
            "val_loss": float(-np.mean(np.log(picked))),
            "val_acc": _accuracy(val_probs, val_y),
        }
        history.epochs.append(entry)
        if log:
            log(entry)

        if entry["val_acc"] > best_val_acc:
            best_val_acc = entry["val_acc"]
            best_params = copy.deepcopy(head.params)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    if best_params is None:
        best_params = copy.deepcopy(head.params)
        history.best_epoch = max(1, len(history.epochs))
    return Head(head_spec, best_params), history


def _epoch_feature_batches(train_samples, backbone, augment_cfg, cfg,
                           epoch, augment_on, cache):
    """Yield (features, labels) batches for one epoch.

    With cache_variants=K > 0, augmented features for variant k = epoch % K
    are computed once and replayed; batch order still reshuffles per epoch.
    """
    acfg = augment_cfg or AugmentConfig(input_side=backbone.spec.input_side)
    if augment_on and cfg.cache_variants > 0:
        k = epoch % cfg.cache_variants
        if k not in cache:
            cache[k] = features_for_samples(
                train_samples, backbone, cfg.batch_size, acfg,
                seed=cfg.seed, epoch=k, augment_on=True, workers=cfg.workers)
        X, y = cache[k]
        order = stream_rng(cfg.seed, f"cache-order:{epoch}").permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yield X[idx], y[idx]
    else:
        for tensors, labels in batch_stream(
                train_samples, cfg.batch_size, cfg.seed, epoch,
                augment_on=augment_on, config=acfg, workers=cfg.workers):
            yield flatten_features(backbone.extract(tensors)), labels


def fit_features(head: Head, X, y, cfg: TrainConfig, epochs: int):
    """Plain minibatch loop over an in-memory feature matrix (fixtures)."""
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    dropout_rng = stream_rng(cfg.seed, "dropout")
    n = len(y)
    for epoch in range(epochs):
        order = stream_rng(cfg.seed, f"fit-order:{epoch}").permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = head.loss_and_grad(X[idx], y[idx], rng=dropout_rng)
            opt.step(head.params, grads)
        probs, _ = head.forward(X, mode="infer")
        if _accuracy(probs, y) == 1.0:
            return epoch + 1
    return epochs


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


def save_checkpoint(head: Head, catalog: ClassCatalog, path,
                    backbone_spec=None, extra=None):
    """Self-describing binary: header JSON + float32 LE parameter blob."""
    names = sorted(head.params)
    blob = b"".join(
        np.ascontiguousarray(head.params[n], dtype="<f4").tobytes()
        for n in names)
    header = {
        "head_spec": head.spec.to_dict(),
        "catalog": catalog.to_dict(),
        "params": [{"name": n, "shape": list(head.params[n].shape)}
                   for n in names],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if backbone_spec is not None:
        header["backbone_spec"] = backbone_spec.to_dict()
    if extra:
        header["extra"] = extra
    hdr = canonical_dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        fh.write(blob)


def load_checkpoint(path, catalog: ClassCatalog = None):
    """Returns (Head, header dict); digest mismatch or truncation is fatal."""
    import json

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise TrainError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CKPT_VERSION:
        raise TrainError(f"{path}: unsupported checkpoint version {version}")
    (hdr_len,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hdr_len].decode("utf-8"))
    except Exception as exc:
        raise TrainError(f"{path}: corrupt header: {exc}") from exc
    blob = data[16 + hdr_len:]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise TrainError(f"{path}: parameter blob digest mismatch (corruption)")

    spec = HeadSpec.from_dict(header["head_spec"])
    if catalog is not None and spec.out_classes != catalog.total_classes:
        raise TrainError(
            f"checkpoint has {spec.out_classes} classes but catalog has "
            f"{catalog.total_classes}")
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        params[entry["name"]] = arr.reshape(shape).copy()
        offset += size * 4
    if offset != len(blob):
        raise TrainError(f"{path}: blob length mismatch (truncated?)")
    return Head(spec, params), header
