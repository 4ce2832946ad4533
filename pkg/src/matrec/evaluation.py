"""Evaluation harness: confusion matrices, accuracy, per-class metrics,
and the one-shot illumination-robustness protocol.

Confusion orientation is fixed: rows = actual class, columns = predicted
class, in catalog order over material classes only (the outlier class
never appears in evaluation partitions).
"""

import datetime
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import illumination_jitter, load_rgb, sample_illumination, AugmentConfig
from .catalog import ClassCatalog
from .inference import TtaConfig, predict_image
from .jsonio import digest_of, write_canonical_json
from .rng import sample_rng


class EvalError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    class_names: list
    counts: np.ndarray  # (K, K) int64, rows = actual

    @classmethod
    def empty(cls, class_names) -> "ConfusionMatrix":
        k = len(class_names)
        return cls(list(class_names), np.zeros((k, k), dtype=np.int64))

    @classmethod
    def from_pairs(cls, class_names, pairs) -> "ConfusionMatrix":
        cm = cls.empty(class_names)
        for actual, predicted in pairs:
            cm.add(actual, predicted)
        return cm

    def add(self, actual: int, predicted: int):
        self.counts[actual, predicted] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy_percent(self) -> float:
        if self.total == 0:
            raise EvalError("empty confusion matrix has no accuracy")
        return 100.0 * self.trace / self.total

    def per_class_metrics(self) -> list:
        """Precision/recall/F1 per class; 0/0 cases reported as None."""
        out = []
        for i, name in enumerate(self.class_names):
            tp = int(self.counts[i, i])
            row = int(self.counts[i].sum())
            col = int(self.counts[:, i].sum())
            recall = tp / row if row else None
            precision = tp / col if col else None
            if precision is None or recall is None or precision + recall == 0:
                f1 = None
            else:
                f1 = 2 * precision * recall / (precision + recall)
            out.append({"class": name, "support": row,
                        "precision": precision, "recall": recall, "f1": f1})
        return out

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names),
                "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(list(d["class_names"]),
                   np.array(d["counts"], dtype=np.int64))


@dataclass
class EvalReport:
    accuracy_percent: float
    confusion: ConfusionMatrix
    per_class: list
    protocol: dict                  # {"tta", "illumination", "seed"}
    checkpoint_digest: str = ""
    timestamp: str = ""
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy_percent": self.accuracy_percent,
            "confusion": self.confusion.to_dict(),
            "per_class": self.per_class,
            "protocol": dict(self.protocol),
            "checkpoint_digest": self.checkpoint_digest,
            "timestamp": self.timestamp,
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            accuracy_percent=float(d["accuracy_percent"]),
            confusion=ConfusionMatrix.from_dict(d["confusion"]),
            per_class=list(d["per_class"]),
            protocol=dict(d["protocol"]),
            checkpoint_digest=d.get("checkpoint_digest", ""),
            timestamp=d.get("timestamp", ""),
            skipped=list(d.get("skipped", [])),
        )

    def content_digest(self) -> str:
        """Digest over everything except the timestamp."""
        d = self.to_dict()
        d.pop("timestamp")
        return digest_of(d)


def report_from_confusion(confusion: ConfusionMatrix, protocol: dict,
                          checkpoint_digest: str = "",
                          skipped=None, timestamp: str = "") -> EvalReport:
    report = EvalReport(
        accuracy_percent=confusion.accuracy_percent,
        confusion=confusion,
        per_class=confusion.per_class_metrics(),
        protocol=protocol,
        checkpoint_digest=checkpoint_digest,
        timestamp=timestamp,
        skipped=list(skipped or []),
    )
    _check_accounting(report)
    return report


def _check_accounting(report: EvalReport):
    cm = report.confusion
    if abs(report.accuracy_percent - cm.accuracy_percent) > 1e-9:
        raise EvalError("accuracy does not equal 100*trace/total")
    for row in report.per_class:
        i = cm.class_names.index(row["class"])
        if row["support"] != int(cm.counts[i].sum()):
            raise EvalError("per-class support does not match row sum")


def evaluate(samples, backbone, head, catalog: ClassCatalog,
             tta: TtaConfig = TtaConfig(),
             transform=None, protocol_extra=None,
             checkpoint_digest: str = "",
             warn=None) -> EvalReport:
    """Predict every sample; unreadable images are listed and excluded.

    `samples`: canonical-order {"id", "path", "label"} list (no outliers).
    `transform(image, sample_index)` optionally perturbs each decoded
    image before prediction (illumination protocol).
    """
    if not samples:
        raise EvalError("empty evaluation partition")
    names = list(catalog.materials)
    outlier_index = catalog.outlier_index
    if outlier_index is not None:
        for s in samples:
            if s["label"] == outlier_index:
                raise EvalError(
                    f"outlier record {s['id']!r} in evaluation set")
    cm = ConfusionMatrix.empty(names)
    skipped = []
    for i, s in enumerate(samples):
        try:
            image = load_rgb(s["path"])
        except Exception as exc:
            skipped.append({"id": s["id"], "reason": str(exc)})
            if warn:
                warn(f"skipping unreadable image {s['id']}: {exc}")
            continue
        if transform is not None:
            image = transform(image, i)
        pred = predict_image(image, backbone, head, catalog, tta)
        cm.add(s["label"], pred.predicted_index)

    protocol = {"tta": tta.enabled, "illumination": False, "seed": None}
    if protocol_extra:
        protocol.update(protocol_extra)
    return report_from_confusion(
        cm, protocol, checkpoint_digest=checkpoint_digest, skipped=skipped,
        timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat())


def illumination_eval(samples, backbone, head, catalog: ClassCatalog,
                      tta: TtaConfig = TtaConfig(), seed: int = 0,
                      params_override=None,
                      checkpoint_digest: str = "", warn=None) -> EvalReport:
    """Evaluate on a fixed one-shot illumination perturbation of the set.

    Each image is transformed exactly once with parameters drawn from its
    (seed, epoch=0, index) stream, so the perturbed set is identical
    across runs with the same seed.
    """
    acfg = AugmentConfig()

    def transform(image, index):
        if params_override is not None:
            params = params_override
        else:
            params = sample_illumination(sample_rng(seed, 0, index), acfg)
        return illumination_jitter(image, params, acfg)

    return evaluate(
        samples, backbone, head, catalog, tta=tta, transform=transform,
        protocol_extra={"illumination": True, "seed": seed},
        checkpoint_digest=checkpoint_digest, warn=warn)


# ---------------------------------------------------------------------------
# report emission

def _csv_confusion(cm: ConfusionMatrix) -> str:
    lines = ["actual\\predicted," + ",".join(cm.class_names)]
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def _fmt(x, digits=4):
    return "n/a" if x is None else f"{x:.{digits}f}"


def _markdown_report(report: EvalReport) -> str:
    cm = report.confusion
    lines = [
        "# Evaluation report",
        "",
        f"- accuracy: {report.accuracy_percent:.4f}%",
        f"- samples: {cm.total} (correct {cm.trace})",
        f"- tta: {report.protocol.get('tta')}",
        f"- illumination: {report.protocol.get('illumination')}"
        + (f" (seed {report.protocol.get('seed')})"
           if report.protocol.get("illumination") else ""),
        "",
        "## Per-class metrics",
        "",
        "| class | support | precision | recall | f1 |",
        "|---|---|---|---|---|",
    ]
    for row in report.per_class:
        lines.append(
            f"| {row['class']} | {row['support']} | {_fmt(row['precision'])} "
            f"| {_fmt(row['recall'])} | {_fmt(row['f1'])} |")
    lines += ["", "## Confusion matrix (rows = actual)", ""]
    header = "| actual\\predicted | " + " | ".join(cm.class_names) + " |"
    lines.append(header)
    lines.append("|" + "---|" * (len(cm.class_names) + 1))
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(f"| {name} | " + " | ".join(str(int(v)) for v in row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir, formats=("json", "csv", "markdown")):
    """Write report.json / confusion.csv / report.md; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out_dir / "report.json"
        write_canonical_json(path, report.to_dict())
        written.append(path)
    if "csv" in formats:
        path = out_dir / "confusion.csv"
        path.write_text(_csv_confusion(report.confusion))
        written.append(path)
    if "markdown" in formats:
        path = out_dir / "report.md"
        path.write_text(_markdown_report(report))
        written.append(path)
    return written
