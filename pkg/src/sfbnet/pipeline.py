"""Synthetic cardiac phantoms, preprocessing, augmentation and post-processing.

Phantom anatomy (labels): 0 background, 1 right-ventricular cavity (a
crescent), 2 myocardium (a ring), 3 left-ventricular cavity (the disk the
ring encloses). Images are per-class mean intensities plus Gaussian noise,
z-scored per image.
"""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .engine import no_grad, ops
from .errors import DataError, DimensionError, GeometrySpecError

BACKGROUND, RV, MYO, LV = 0, 1, 2, 3
CLASS_NAMES = {RV: "RV", MYO: "MYO", LV: "LV"}


@dataclasses.dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32, z-scored
    labels: np.ndarray  # (H, W) int32 in {0, 1, 2, 3}
    spacing: tuple = (1.0, 1.0)  # mm per pixel (y, x)

    def __post_init__(self):
        if self.image.shape[-2:] != self.labels.shape:
            raise DimensionError(
                f"image {self.image.shape} and labels {self.labels.shape} disagree"
            )
        if min(self.spacing) <= 0:
            raise DataError(f"pixel spacing must be positive, got {self.spacing}")


@dataclasses.dataclass
class PhantomSpec:
    seed: int = 0
    size: tuple = (64, 64)
    lv_center: tuple = (32.0, 36.0)  # (y, x)
    lv_radius: float = 8.0
    myo_thickness: float = 3.5
    rv_radius: float = 8.5
    rv_gap: float = 1.5  # how deep the crescent tucks against the ring
    intensities: tuple = (0.15, 0.55, 0.35, 0.85)  # bg, RV, MYO, LV means
    noise_sigma: float = 0.05
    spacing: tuple = (1.0, 1.0)

    def validate(self) -> None:
        h, w = self.size
        cy, cx = self.lv_center
        outer = self.lv_radius + self.myo_thickness
        if self.lv_radius <= 0 or self.myo_thickness < 1.0 or self.rv_radius <= 0:
            raise GeometrySpecError(
                f"degenerate radii: lv={self.lv_radius}, myo thickness="
                f"{self.myo_thickness}, rv={self.rv_radius}"
            )
        if not (outer <= cy <= h - 1 - outer and outer <= cx <= w - 1 - outer):
            raise GeometrySpecError(
                f"ring of radius {outer:.1f} at ({cy:.1f}, {cx:.1f}) leaves "
                f"the {h}x{w} image"
            )
        rv_cx = cx - outer - self.rv_gap
        if rv_cx - self.rv_radius < 0:
            raise GeometrySpecError(
                f"crescent centre {rv_cx:.1f} - radius {self.rv_radius:.1f} "
                f"leaves the image on the left"
            )


def generate_phantom(spec: PhantomSpec) -> Sample:
    """Deterministic synthetic sample; same spec (and seed) => same sample."""
    spec.validate()
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = spec.lv_center
    d_lv = np.hypot(yy - cy, xx - cx)

    labels = np.zeros((h, w), dtype=np.int32)
    outer = spec.lv_radius + spec.myo_thickness
    rv_cy, rv_cx = cy, cx - outer - spec.rv_gap
    d_rv = np.hypot(yy - rv_cy, xx - rv_cx)
    labels[d_rv <= spec.rv_radius] = RV
    labels[d_lv <= outer] = MYO
    labels[d_lv <= spec.lv_radius] = LV

    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.intensities, dtype=np.float64)
    image = means[labels] + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image = (image - image.mean()) / max(image.std(), 1e-8)
    return Sample(image[None].astype(np.float32), labels, tuple(spec.spacing))


def random_phantom_spec(seed: int, size=(64, 64)) -> PhantomSpec:
    """Jittered geometry so a dataset is not eight copies of one heart."""
    rng = np.random.default_rng(seed)
    h, w = size
    scale = min(h, w) / 64.0
    # floors keep the anatomy rasterizable on very small canvases
    lv_radius = max(2.5, scale * rng.uniform(6.5, 9.5))
    myo_thickness = max(1.5, scale * rng.uniform(2.5, 4.0))
    rv_radius = max(2.0, scale * rng.uniform(6.0, 9.0))
    outer = lv_radius + myo_thickness
    margin = outer + 1.0
    cy = rng.uniform(margin, h - 1 - margin)
    cx_low = rv_radius + outer + 2.0 + 1.0
    cx = rng.uniform(min(cx_low, w - 1 - margin), w - 1 - margin)
    return PhantomSpec(
        seed=seed, size=size, lv_center=(cy, cx), lv_radius=lv_radius,
        myo_thickness=myo_thickness, rv_radius=rv_radius,
        rv_gap=rng.uniform(0.5, 2.0), noise_sigma=rng.uniform(0.03, 0.08),
    )


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _resize(arr: np.ndarray, out_hw: tuple, order: int) -> np.ndarray:
    """Resize the trailing two axes to ``out_hw`` (bilinear or nearest)."""
    h, w = arr.shape[-2:]
    oh, ow = out_hw
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack(grid)

    def one(plane):
        return ndimage.map_coordinates(plane, coords, order=order, mode="nearest")

    if arr.ndim == 2:
        return one(arr)
    flat = arr.reshape(-1, h, w)
    return np.stack([one(p) for p in flat]).reshape(*arr.shape[:-2], oh, ow)


def resample_xy(sample: Sample, target_spacing: tuple) -> Sample:
    """Resample to a new pixel spacing: bilinear image, nearest labels."""
    ty, tx = target_spacing
    if ty <= 0 or tx <= 0:
        raise DataError(f"target spacing must be positive, got {target_spacing}")
    sy, sx = sample.spacing
    h, w = sample.labels.shape
    oh = int(round(h * sy / ty))
    ow = int(round(w * sx / tx))
    if oh < 1 or ow < 1:
        raise DataError(
            f"resampling {h}x{w} from {sample.spacing} to {target_spacing} "
            f"collapses the image"
        )
    if (oh, ow) == (h, w) and (sy, sx) == (ty, tx):
        return Sample(sample.image.copy(), sample.labels.copy(), (ty, tx))
    image = _resize(sample.image.astype(np.float64), (oh, ow), order=1)
    labels = _resize(sample.labels, (oh, ow), order=0)
    return Sample(image.astype(np.float32), labels.astype(np.int32), (ty, tx))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class AugmentParams:
    rotate_deg: float = 0.0
    scale: float = 1.0
    mirror_y: bool = False
    mirror_x: bool = False
    gamma: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    lowres_factor: float = 1.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0


def sample_augment_params(rng_seed: int) -> AugmentParams:
    rng = np.random.default_rng(rng_seed)
    p = AugmentParams()
    if rng.random() < 0.5:
        p.rotate_deg = rng.uniform(-15.0, 15.0)
    if rng.random() < 0.5:
        p.scale = rng.uniform(0.85, 1.25)
    if rng.random() < 0.5:
        p.mirror_y = bool(rng.random() < 0.5)
        p.mirror_x = bool(rng.random() < 0.5)
    if rng.random() < 0.3:
        p.gamma = rng.uniform(0.7, 1.4)
    if rng.random() < 0.3:
        p.brightness = rng.uniform(-0.2, 0.2)
    if rng.random() < 0.3:
        p.contrast = rng.uniform(0.75, 1.25)
    if rng.random() < 0.25:
        p.lowres_factor = rng.uniform(0.5, 0.9)
    if rng.random() < 0.3:
        p.noise_sigma = rng.uniform(0.0, 0.1)
    if rng.random() < 0.25:
        p.blur_sigma = rng.uniform(0.3, 1.0)
    return p


def _affine_matrix(rotate_deg: float, scale: float, shape: tuple):
    """Output->input affine (matrix, offset) about the image centre."""
    theta = math.radians(rotate_deg)
    c, s = math.cos(theta), math.sin(theta)
    forward = np.array([[c, -s], [s, c]]) * scale
    inverse = np.linalg.inv(forward)
    centre = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    offset = centre - inverse @ centre
    return inverse, offset


def _apply_geometric(plane: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    out = plane
    if params.rotate_deg != 0.0 or params.scale != 1.0:
        matrix, offset = _affine_matrix(params.rotate_deg, params.scale, plane.shape)
        out = ndimage.affine_transform(
            out, matrix, offset=offset, order=order, mode="nearest")
    if params.mirror_y:
        out = out[::-1, :]
    if params.mirror_x:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def apply_augment(sample: Sample, params: AugmentParams,
                  noise_seed: int = 0) -> Sample:
    """Apply one parameter set; labels get the identical geometric transform
    with nearest-neighbour sampling and are never interpolated."""
    image = sample.image[0].astype(np.float64)
    labels = sample.labels

    image = _apply_geometric(image, params, order=1)
    labels = _apply_geometric(labels, params, order=0).astype(np.int32)

    if params.lowres_factor < 1.0:
        h, w = image.shape
        small = (max(1, int(round(h * params.lowres_factor))),
                 max(1, int(round(w * params.lowres_factor))))
        image = _resize(_resize(image, small, order=1), (h, w), order=1)
    if params.blur_sigma > 0.0:
        image = ndimage.gaussian_filter(image, params.blur_sigma)
    if params.gamma != 1.0:
        lo, hi = image.min(), image.max()
        if hi > lo:
            unit = (image - lo) / (hi - lo)
            image = unit ** params.gamma * (hi - lo) + lo
    if params.contrast != 1.0:
        mean = image.mean()
        image = (image - mean) * params.contrast + mean
    if params.brightness != 0.0:
        image = image + params.brightness
    if params.noise_sigma > 0.0:
        rng = np.random.default_rng(noise_seed)
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)

    return Sample(image[None].astype(np.float32), labels, sample.spacing)


def augment(sample: Sample, rng_seed: int) -> Sample:
    """Randomly parameterized augmentation, reproducible from the seed."""
    params = sample_augment_params(rng_seed)
    return apply_augment(sample, params, noise_seed=rng_seed + 1)


def mirror(sample: Sample, axis: str) -> Sample:
    """Mirror image and labels along 'y', 'x' or 'yx' (an involution)."""
    params = AugmentParams(mirror_y="y" in axis, mirror_x="x" in axis)
    return apply_augment(sample, params)


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def predict_probs(model, images: np.ndarray, training: bool = False) -> np.ndarray:
    """Full-resolution softmax probabilities, (N, C, H, W)."""
    with no_grad():
        full, _, _ = model.forward(images, training=training)
        n, c, h, w = full.shape
        tok = ops.transpose(ops.reshape(full, (n, c, h * w)), (0, 2, 1))
        probs = ops.softmax_lastdim(tok)
        probs = ops.transpose(probs, (0, 2, 1))
        return ops.reshape(probs, (n, c, h, w)).data


def tta_mirror_predict(model, image: np.ndarray, training: bool = False) -> np.ndarray:
    """Mean softmax over {identity, x-flip, y-flip, xy-flip}, (C, H, W).

    Each flipped prediction is flipped back before averaging.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 1:
        raise DimensionError(f"expected a (1, H, W) image, got {image.shape}")
    flips = [(False, False), (False, True), (True, False), (True, True)]
    batch = np.stack([_flip_image(image, fy, fx) for fy, fx in flips])
    probs = predict_probs(model, batch, training=training)
    undone = [_flip_image(p, fy, fx) for p, (fy, fx) in zip(probs, flips)]
    return np.mean(undone, axis=0)


def _flip_image(arr: np.ndarray, flip_y: bool, flip_x: bool) -> np.ndarray:
    if flip_y:
        arr = arr[..., ::-1, :]
    if flip_x:
        arr = arr[..., :, ::-1]
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def largest_component_filter(pred_labels: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected foreground component.

    The foreground is binarized (all classes merged), components are
    labelled, and everything outside the largest one is set to background;
    surviving pixels keep their class. Ties break toward the component
    first reached in scan order.
    """
    pred_labels = np.asarray(pred_labels)
    foreground = pred_labels > 0
    if not foreground.any():
        return pred_labels.copy()
    comp, n = ndimage.label(foreground, structure=_FOUR_CONNECTED)
    if n == 1:
        return pred_labels.copy()
    sizes = ndimage.sum_labels(foreground, comp, index=np.arange(1, n + 1))
    keep = 1 + int(np.argmax(sizes))  # argmax returns the first maximum
    out = pred_labels.copy()
    out[comp != keep] = 0
    return out


# ---------------------------------------------------------------------------
# sample file format ("RAWT"): one JSON header line, then a raw LE blob
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def save_rawt(path, array: np.ndarray, spacing: tuple) -> None:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        code, dtype = "f32", _DTYPES["f32"]
    elif array.dtype.kind in "iu":
        code, dtype = "i32", _DTYPES["i32"]
    else:
        raise DataError(f"cannot store dtype {array.dtype}")
    header = json.dumps({
        "dtype": code,
        "shape": list(array.shape),
        "spacing": [float(spacing[0]), float(spacing[1])],
    })
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def load_rawt(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        shape = tuple(int(v) for v in header["shape"])
        spacing = tuple(float(v) for v in header["spacing"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header ({exc})") from exc
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(blob, dtype=dtype, count=count).reshape(shape)
    return arr.copy(), spacing


def save_sample(directory, case_id: int, sample: Sample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"case_{case_id:04d}"
    save_rawt(directory / f"{stem}.img.rawt", sample.image, sample.spacing)
    save_rawt(directory / f"{stem}.lbl.rawt", sample.labels, sample.spacing)


def load_dataset(directory) -> list:
    """All samples under a directory of case_####.{img,lbl}.rawt pairs."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    samples = []
    for img_path in sorted(directory.glob("*.img.rawt")):
        lbl_path = img_path.with_name(img_path.name.replace(".img.", ".lbl."))
        if not lbl_path.exists():
            raise DataError(f"missing label file for {img_path.name}")
        image, spacing = load_rawt(img_path)
        labels, _ = load_rawt(lbl_path)
        samples.append(Sample(image.astype(np.float32),
                              labels.astype(np.int32), spacing))
    if not samples:
        raise DataError(f"no samples found under {directory}")
    return samples


def write_phantom_dataset(directory, cases: int, size=(64, 64), seed: int = 0) -> int:
    for i in range(cases):
        spec = random_phantom_spec(seed * 100003 + i, size=size)
        save_sample(directory, i, generate_phantom(spec))
    return cases
