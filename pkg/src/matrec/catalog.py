"""Material class catalog: the single source of label indices.

Material classes occupy indices 0..10 in catalog order; the optional
outlier class (off-domain regularization images) is always last.
"""

from dataclasses import dataclass, field

from .jsonio import read_json, write_canonical_json

# Dataset class names and per-class image counts of the published dataset.
DEFAULT_MATERIALS = [
    "sandstorm",
    "paving",
    "gravel",
    "stone",
    "cement-granular",
    "brick",
    "soil-vegetation",
    "wood",
    "asphalt",
    "clay-hollow-block",
    "concrete-block",
]

EXPECTED_COUNTS = {
    "sandstorm": 146,
    "paving": 140,
    "gravel": 81,
    "stone": 180,
    "cement-granular": 118,
    "brick": 179,
    "soil-vegetation": 70,
    "wood": 53,
    "asphalt": 86,
    "clay-hollow-block": 76,
    "concrete-block": 102,
}

OUTLIER_CLASS_NAME = "outlier"


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class ClassCatalog:
    materials: tuple = tuple(DEFAULT_MATERIALS)
    has_outlier: bool = False
    outlier_name: str = OUTLIER_CLASS_NAME

    def __post_init__(self):
        names = list(self.materials)
        if self.has_outlier:
            names.append(self.outlier_name)
        if len(set(names)) != len(names):
            raise CatalogError("class names must be unique")
        if not self.materials:
            raise CatalogError("catalog needs at least one material class")

    @property
    def total_classes(self) -> int:
        return len(self.materials) + (1 if self.has_outlier else 0)

    @property
    def outlier_index(self):
        return len(self.materials) if self.has_outlier else None

    @property
    def material_indices(self):
        return range(len(self.materials))

    def class_names(self):
        names = list(self.materials)
        if self.has_outlier:
            names.append(self.outlier_name)
        return names

    def index_of(self, name: str) -> int:
        try:
            return self.class_names().index(name)
        except ValueError:
            raise CatalogError(f"unknown class name: {name!r}") from None

    def name_of(self, index: int) -> str:
        names = self.class_names()
        if not 0 <= index < len(names):
            raise CatalogError(f"class index {index} out of range")
        return names[index]

    def to_dict(self) -> dict:
        return {
            "materials": list(self.materials),
            "has_outlier": self.has_outlier,
            "outlier_name": self.outlier_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        return cls(
            materials=tuple(d["materials"]),
            has_outlier=bool(d.get("has_outlier", False)),
            outlier_name=d.get("outlier_name", OUTLIER_CLASS_NAME),
        )

    def save(self, path):
        write_canonical_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "ClassCatalog":
        return cls.from_dict(read_json(path))


def default_catalog(with_outlier: bool = False) -> ClassCatalog:
    return ClassCatalog(materials=tuple(DEFAULT_MATERIALS), has_outlier=with_outlier)
