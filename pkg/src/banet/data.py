"""Input conversion, training-time augmentation and a synthetic scene generator."""
from __future__ import annotations

import numpy as np

from .tensor import InvalidArgument, interp_matrix

# per-channel statistics used to standardise 8-bit RGB input
INPUT_MEAN = np.array([0.485, 0.456, 0.406], np.float32)
INPUT_STD = np.array([0.229, 0.224, 0.225], np.float32)

SCALE_RANGE = (0.75, 1.25)
AUGMENT_P = 0.5


def to_input(rgb: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] (or a batch [N, H, W, 3]) to standardised float32 NCHW."""
    rgb = np.asarray(rgb)
    single = rgb.ndim == 3
    x = (rgb.astype(np.float32) / 255.0 - INPUT_MEAN) / INPUT_STD
    x = np.moveaxis(x[None] if single else x, -1, 1)
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel bilinear resize of an [H, W, ...] array."""
    mh = interp_matrix(image.shape[0], height)
    mw = interp_matrix(image.shape[1], width)
    out = np.tensordot(mh, image.astype(np.float64), axes=(1, 0))
    out = np.moveaxis(np.tensordot(mw, out, axes=(1, 1)), 0, 1)
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def resize_nearest(label: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest resize (source index floor(d * in / out)); never invents labels."""
    rows = np.minimum((np.arange(height) * label.shape[0]) // height, label.shape[0] - 1)
    cols = np.minimum((np.arange(width) * label.shape[1]) // width, label.shape[1] - 1)
    return label[rows][:, cols]


def fit(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centre-crop or reflect-pad the first two axes to height x width."""
    for axis, target in ((0, height), (1, width)):
        size = arr.shape[axis]
        if size > target:
            start = (size - target) // 2
            arr = np.take(arr, np.arange(start, start + target), axis=axis)
        elif size < target:
            before = (target - size) // 2
            widths = [(0, 0)] * arr.ndim
            widths[axis] = (before, target - size - before)
            arr = np.pad(arr, widths, mode="reflect")
    return arr


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            p: float = AUGMENT_P, scale_range=SCALE_RANGE) -> tuple[np.ndarray, np.ndarray]:
    """Random rot90, horizontal flip, vertical flip and rescale, each with probability p.

    image is [H, W, C], label [H, W]; both receive the same geometry and keep
    their size (rescaling is followed by a centre crop or reflect pad).
    """
    if image.shape[:2] != label.shape:
        raise InvalidArgument(f"image {image.shape[:2]} and label {label.shape} differ in size")
    h, w = label.shape
    if rng.random() < p:
        k = int(rng.integers(1, 4))
        image, label = np.rot90(image, k, (0, 1)), np.rot90(label, k, (0, 1))
    if rng.random() < p:
        image, label = image[:, ::-1], label[:, ::-1]
    if rng.random() < p:
        image, label = image[::-1], label[::-1]
    if rng.random() < p:
        s = rng.uniform(*scale_range)
        nh, nw = max(int(round(image.shape[0] * s)), 1), max(int(round(image.shape[1] * s)), 1)
        image = resize_bilinear(image, nh, nw)
        label = resize_nearest(label, nh, nw)
    image, label = fit(image, h, w), fit(label, h, w)
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SHAPES = ("rectangle", "disc", "triangle", "ring", "cross")


def _class_colors(k: int) -> np.ndarray:
    # fixed, well separated base colors; background first
    base = np.array([
        [110, 100, 90], [220, 60, 50], [50, 90, 210], [60, 190, 70],
        [230, 210, 60], [170, 70, 200], [40, 200, 200], [240, 140, 40],
    ], np.float64)
    if k > len(base):
        raise InvalidArgument(f"synthetic scenes support at most {len(base)} classes")
    return base[:k]


def _mask(shape: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "rectangle":
        return (np.abs(dy) <= r[0]) & (np.abs(dx) <= r[1])
    if shape == "disc":
        return dy ** 2 + dx ** 2 <= r[0] ** 2
    if shape == "triangle":
        return (dy <= r[0]) & (dy >= -r[0]) & (np.abs(dx) <= (dy + r[0]) / 2)
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r[0] ** 2) & (d2 >= (0.5 * r[0]) ** 2)
    return ((np.abs(dy) <= r[0]) & (np.abs(dx) <= r[0] / 3)) | ((np.abs(dx) <= r[0]) & (np.abs(dy) <= r[0] / 3))


def synth_scene(size: int, num_classes: int, rng: np.random.Generator,
                shapes_per_class: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """One uint8 [size, size, 3] image and its [size, size] label map.

    Class 0 is a textured background; class c >= 1 is drawn as shape type
    SHAPES[c - 1] in its own color with mild per-pixel noise.
    """
    if not 2 <= num_classes <= len(SHAPES) + 1:
        raise InvalidArgument(f"num_classes must be in [2, {len(SHAPES) + 1}], got {num_classes}")
    colors = _class_colors(num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    label = np.zeros((size, size), np.uint8)
    fx, fy, phase = rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(0, 2 * np.pi)
    texture = 18.0 * np.sin(fx * xx + phase) * np.cos(fy * yy)
    img = colors[0] + texture[..., None]
    lo, hi = size * 0.08, size * 0.18
    for _ in range(shapes_per_class):
        for c in rng.permutation(np.arange(1, num_classes)):
            r = rng.uniform(lo, hi, size=2)
            cy, cx = rng.uniform(r.max(), size - r.max(), size=2)
            m = _mask(SHAPES[c - 1], yy, xx, cy, cx, r)
            label[m] = c
            img[m] = colors[c]
    img = img + rng.normal(0.0, 8.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), label


def synth_dataset(n: int, size: int = 64, num_classes: int = 4, seed: int = 0,
                  shapes_per_class: int = 2) -> list[tuple[np.ndarray, np.ndarray]]:
    """`n` deterministic scenes; the same arguments always give identical bytes."""
    if n < 0 or size <= 0:
        raise InvalidArgument(f"need n >= 0 and size > 0, got n={n}, size={size}")
    rng = np.random.default_rng(seed)
    return [synth_scene(size, num_classes, rng, shapes_per_class) for _ in range(n)]
