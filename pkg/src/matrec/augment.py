"""During-training augmentation pipeline: crop -> illumination -> flip -> resize.

Every transform is a pure function of (image, rng) and every sample's rng
is derived from (seed, epoch, index), so the pipeline gives bit-identical
results for any worker count. Crop runs on the high-resolution original;
the resize to network input comes last.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .rng import sample_rng, stream_rng


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    crop_fraction_range: tuple = (0.5, 1.0)     # per dimension
    contrast_range: tuple = (0.3, 1.0)
    gamma_range: tuple = (0.5, 5.0)
    saturation_range: tuple = (0.7, 1.0)
    flip_prob_per_axis: float = 0.25
    input_side: int = 224

    def __post_init__(self):
        for lo, hi in (self.crop_fraction_range, self.contrast_range,
                       self.gamma_range, self.saturation_range):
            if not (0 < lo <= hi):
                raise AugmentError(f"bad range ({lo}, {hi})")
        if not 0 <= self.flip_prob_per_axis <= 1:
            raise AugmentError("flip probability must be in [0, 1]")
        if self.input_side < 1:
            raise AugmentError("input_side must be >= 1")

    def to_dict(self) -> dict:
        return {
            "crop_fraction_range": list(self.crop_fraction_range),
            "contrast_range": list(self.contrast_range),
            "gamma_range": list(self.gamma_range),
            "saturation_range": list(self.saturation_range),
            "flip_prob_per_axis": self.flip_prob_per_axis,
            "input_side": self.input_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(
            crop_fraction_range=tuple(d.get("crop_fraction_range", (0.5, 1.0))),
            contrast_range=tuple(d.get("contrast_range", (0.3, 1.0))),
            gamma_range=tuple(d.get("gamma_range", (0.5, 5.0))),
            saturation_range=tuple(d.get("saturation_range", (0.7, 1.0))),
            flip_prob_per_axis=float(d.get("flip_prob_per_axis", 0.25)),
            input_side=int(d.get("input_side", 224)),
        )


def load_rgb(path) -> np.ndarray:
    """Decode an image file to an HxWx3 uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise AugmentError(f"cannot decode image {path}: {exc}") from exc


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise AugmentError(f"expected HxWx3 image, got shape {image.shape}")
    return image


def _sample_open(rng, lo, hi):
    """Uniform draw kept strictly inside (lo, hi)."""
    x = lo + rng.random() * (hi - lo)
    if x <= lo:
        x = np.nextafter(lo, hi)
    return float(x)


def crop_params(shape, rng, fraction_range=(0.5, 1.0)):
    """Draw (top, left, h, w): sizes uniform-integer in [ceil(f_lo*D), D]."""
    H, W = shape[:2]
    f_lo = fraction_range[0]
    h_lo = int(np.ceil(f_lo * H))
    w_lo = int(np.ceil(f_lo * W))
    h = int(rng.integers(h_lo, H + 1))
    w = int(rng.integers(w_lo, W + 1))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return top, left, h, w


def random_crop(image, rng, fraction_range=(0.5, 1.0)):
    """Random sub-rectangle, each side between half and full size.

    No resampling here: the crop is a contiguous view of the original
    pixels; the resize to network input happens later in the pipeline.
    """
    image = _check_image(image)
    H, W = image.shape[:2]
    if H < 2 or W < 2:
        raise AugmentError(f"degenerate image {H}x{W}, need at least 2x2")
    top, left, h, w = crop_params(image.shape, rng, fraction_range)
    return image[top:top + h, left:left + w].copy()


def sample_illumination(rng, config: AugmentConfig = AugmentConfig()):
    c = _sample_open(rng, *config.contrast_range)
    g = _sample_open(rng, *config.gamma_range)
    s = _sample_open(rng, *config.saturation_range)
    return c, g, s


def illumination_jitter(image, params, config: AugmentConfig = AugmentConfig()):
    """Contrast, gamma, saturation in that order, on [0,1]-mapped channels.

    contrast:   x -> 0.5 + c*(x - 0.5)
    gamma:      x -> x**g
    saturation: x -> gray + s*(x - gray),  gray = .299R + .587G + .114B
    """
    image = _check_image(image)
    c, g, s = params
    for name, val, (lo, hi) in (("contrast", c, config.contrast_range),
                                ("gamma", g, config.gamma_range),
                                ("saturation", s, config.saturation_range)):
        if not lo <= val <= hi:
            raise AugmentError(f"{name}={val} outside [{lo}, {hi}]")
    x = image.astype(np.float64) / 255.0
    x = 0.5 + c * (x - 0.5)
    x = np.clip(x, 0.0, 1.0) ** g
    gray = x @ np.array([0.299, 0.587, 0.114])
    x = gray[..., None] + s * (x - gray[..., None])
    x = np.clip(x, 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def random_flip(image, rng, prob_per_axis: float = 0.25):
    """Independent horizontal/vertical flips, default 0.25 per axis."""
    image = _check_image(image)
    u = rng.random(2)
    if u[0] < prob_per_axis:
        image = image[:, ::-1]
    if u[1] < prob_per_axis:
        image = image[::-1, :]
    return np.ascontiguousarray(image)


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center convention, rounded to uint8."""
    image = _check_image(image)
    H, W = image.shape[:2]
    if H < 1 or W < 1:
        raise AugmentError("empty image")
    if (H, W) == (out_h, out_w):
        return image.copy()
    arr = image.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c = np.clip(y0, 0, H - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    tl = arr[np.ix_(y0c, x0c)]
    tr = arr[np.ix_(y0c, x1c)]
    bl = arr[np.ix_(y1c, x0c)]
    br = arr[np.ix_(y1c, x1c)]
    out = (tl * (1 - wy) * (1 - wx) + tr * (1 - wy) * wx
           + bl * wy * (1 - wx) + br * wy * wx)
    return np.floor(np.clip(out, 0.0, 255.0) + 0.5).astype(np.uint8)


def resize_to_input(image, input_side: int = 224) -> np.ndarray:
    return resize_bilinear(image, input_side, input_side)


def augment_image(image, rng, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Full pipeline on a decoded image; rng draw order is the contract."""
    image = random_crop(image, rng, config.crop_fraction_range)
    image = illumination_jitter(image, sample_illumination(rng, config), config)
    image = random_flip(image, rng, config.flip_prob_per_axis)
    return resize_to_input(image, config.input_side)


def augment_record(path, seed: int, epoch: int, index: int,
                   config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Training tensor for one sample: pure function of its arguments."""
    image = load_rgb(path)
    return augment_image(image, sample_rng(seed, epoch, index), config)


def eval_tensor(path, input_side: int = 224) -> np.ndarray:
    """Evaluation path: plain resize, no augmentation."""
    return resize_to_input(load_rgb(path), input_side)


def batch_stream(samples, batch_size: int, seed: int, epoch: int,
                 augment_on: bool = True,
                 config: AugmentConfig = AugmentConfig(),
                 workers: int = 1):
    """Yield (uint8 tensor batch, int label batch) covering one epoch.

    `samples` is the canonical-order list of {"path", "label"} dicts for a
    partition. The per-sample rng index is the sample's canonical position,
    and batch order comes from a (seed, epoch) shuffle, so batch contents
    are independent of worker count. With augmentation off, order is
    canonical and tensors are plain resizes (identical every epoch).
    """
    if batch_size < 1:
        raise AugmentError("batch_size must be >= 1")
    n = len(samples)
    if n == 0:
        raise AugmentError("empty partition")
    if augment_on:
        order = stream_rng(seed, f"order:{epoch}").permutation(n)
    else:
        order = np.arange(n)

    def produce(i):
        s = samples[int(i)]
        if augment_on:
            tensor = augment_record(s["path"], seed, epoch, int(i), config)
        else:
            tensor = eval_tensor(s["path"], config.input_side)
        return tensor, s["label"]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for start in range(0, n, batch_size):
            chunk = order[start:start + batch_size]
            results = list(pool.map(produce, chunk))
            tensors = np.stack([t for t, _ in results])
            labels = np.array([l for _, l in results], dtype=np.int64)
            yield tensors, labels
