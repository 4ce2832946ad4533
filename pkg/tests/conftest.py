import numpy as np
import pytest
from PIL import Image

from matrec.catalog import ClassCatalog, default_catalog

SYNTH_MATERIALS = ("red-ore", "green-moss", "blue-slate")
SYNTH_BASE = {
    "red-ore": (180, 80, 80),
    "green-moss": (80, 180, 80),
    "blue-slate": (80, 80, 180),
}


def synth_image(class_name: str, rng: np.random.Generator,
                size=(320, 320)) -> np.ndarray:
    """Color-dominant noise texture; hue ordering survives the augmentation
    pipeline, so classes stay linearly separable from pooled features."""
    h, w = size
    base = np.array(SYNTH_BASE[class_name], dtype=np.float64)
    brightness = rng.uniform(0.8, 1.2)
    img = base * brightness + rng.uniform(-40, 40, size=(h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def write_synth_dataset(root, per_class=40, seed=7, size=(320, 320),
                        materials=SYNTH_MATERIALS):
    root.mkdir(parents=True, exist_ok=True)
    for ci, name in enumerate(materials):
        class_dir = root / name
        class_dir.mkdir(exist_ok=True)
        rng = np.random.Generator(np.random.PCG64([seed, ci]))
        for i in range(per_class):
            img = synth_image(name, rng, size)
            Image.fromarray(img).save(class_dir / f"img_{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def synth_catalog():
    return ClassCatalog(materials=SYNTH_MATERIALS)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    return write_synth_dataset(tmp_path_factory.mktemp("synth"), per_class=40)


@pytest.fixture(scope="session")
def eleven_class_root(tmp_path_factory):
    """Tiny dataset shaped like the published one: 11 classes, 3 images each."""
    root = tmp_path_factory.mktemp("eleven")
    catalog = default_catalog()
    rng = np.random.Generator(np.random.PCG64(11))
    for name in catalog.materials:
        d = root / name
        d.mkdir()
        for i in range(3):
            img = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
            Image.fromarray(img).save(d / f"{i}.png")
    return root


@pytest.fixture(scope="session")
def outlier_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("outliers")
    rng = np.random.Generator(np.random.PCG64(99))
    for i in range(10):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        img[::2, ::2] = rng.integers(100, 255, size=3, dtype=np.uint8)
        Image.fromarray(img).save(d / f"chicken_{i:02d}.png")
    return d


@pytest.fixture()
def photo_image():
    """A deterministic smooth 'photo' with gradients and texture."""
    rng = np.random.Generator(np.random.PCG64(5))
    y, x = np.mgrid[0:480, 0:640]
    img = np.stack([
        (x / 639) * 255,
        (y / 479) * 255,
        128 + 100 * np.sin(x / 17.0) * np.cos(y / 23.0),
    ], axis=-1)
    img += rng.uniform(-10, 10, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)
