"""Fundus dataset ingestion, resizing, FOV masks and the 38-variant augmentation grid.

Dataset directory layout::

    <root>/manifest.txt     key = value lines
    <root>/images/<id>.<ext>
    <root>/gt/<id>.<ext>
    <root>/fov/<id>.<ext>   optional

Images are held channel-first, ``(3, H, W)`` float32 in [0, 1]; masks are
``(H, W)`` uint8 in {0, 1}.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

TARGET_SIZE = 512
ROTATIONS = tuple(range(-90, 91, 10))  # 19 angles
CONTRAST_FACTORS = (0.9, 1.1)
AUGMENT_FACTOR = len(ROTATIONS) * len(CONTRAST_FACTORS)  # 38

GT_THRESHOLD = 128
FOV_LUMINANCE = 0.06
FOV_MIN_COVERAGE = 0.30
FOV_CLOSING_DIAMETER = 5

IMAGE_EXTENSIONS = (".tif", ".tiff", ".ppm", ".jpg", ".jpeg", ".png", ".gif")
FORMATS = {"tif", "ppm", "jpg", "png"}

# Published train/test counts of the public datasets, checked when a
# manifest uses one of these names.
PRESETS = {
    "DRIVE": dict(train=20, test=20, native_resolution=(584, 565), fov_degrees=45, format="tif"),
    "STARE": dict(train=16, test=4, native_resolution=(605, 700), fov_degrees=35, format="ppm"),
    "CHASE": dict(train=20, test=8, native_resolution=(990, 960), fov_degrees=30, format="jpg"),
}


class DataError(Exception):
    """Dataset files are missing, unreadable or inconsistent."""


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    root: Path
    train: tuple
    test: tuple
    format: str = "png"
    native_resolution: tuple | None = None
    fov_degrees: float | None = None
    has_fov_masks: bool = False

    def __post_init__(self):
        if self.format not in FORMATS:
            raise DataError(f"unsupported image format {self.format!r}")
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise DataError(f"train and test splits share ids: {sorted(overlap)}")
        preset = PRESETS.get(self.name.upper())
        if preset and (len(self.train), len(self.test)) != (preset["train"], preset["test"]):
            raise DataError(
                f"{self.name} expects {preset['train']}/{preset['test']} train/test images, "
                f"manifest lists {len(self.train)}/{len(self.test)}"
            )

    @property
    def augmented_train_size(self) -> int:
        return len(self.train) * AUGMENT_FACTOR


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise DataError(f"not a boolean: {text!r}")


def _split_ids(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def read_manifest(path) -> DatasetManifest:
    """Parse ``manifest.txt`` (or the manifest inside a dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    fields: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        fields[k] = v
    try:
        res = fields.get("native_resolution")
        return DatasetManifest(
            name=fields["name"],
            root=path.parent,
            train=_split_ids(fields.get("train", "")),
            test=_split_ids(fields.get("test", "")),
            format=fields.get("format", "png"),
            native_resolution=tuple(int(x) for x in res.lower().split("x")) if res else None,
            fov_degrees=float(fields["fov_degrees"]) if "fov_degrees" in fields else None,
            has_fov_masks=_parse_bool(fields.get("has_fov_masks", "false")),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else Path(manifest.root) / "manifest.txt"
    lines = [
        f"name = {manifest.name}",
        f"format = {manifest.format}",
        f"has_fov_masks = {str(manifest.has_fov_masks).lower()}",
        f"train = {','.join(manifest.train)}",
        f"test = {','.join(manifest.test)}",
    ]
    if manifest.native_resolution:
        lines.append("native_resolution = {}x{}".format(*manifest.native_resolution))
    if manifest.fov_degrees is not None:
        lines.append(f"fov_degrees = {manifest.fov_degrees:g}")
    path.write_text("\n".join(lines) + "\n")
    return path


# -- decoding --------------------------------------------------------------------


def _find(directory: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        p = directory / f"{stem}{ext}"
        if p.is_file():
            return p
    return None


def read_image(path) -> np.ndarray:
    """Decode an RGB image to ``(3, H, W)`` float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path) -> np.ndarray:
    """Decode a mask and binarize at 128/255."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from None
    return (arr >= GT_THRESHOLD).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write a ``(3, H, W)`` [0, 1] image; JPEG is saved at quality 100 without chroma subsampling."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    kwargs = {"quality": 100, "subsampling": 0} if path.suffix.lower() in (".jpg", ".jpeg") else {}
    Image.fromarray(arr).save(path, **kwargs)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    gt: np.ndarray
    fov: np.ndarray
    source_id: str = ""
    tag: str = "base"


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """Decode one sample at native resolution (no resizing, no augmentation)."""
    root = Path(manifest.root)
    img_path = _find(root / "images", sample_id)
    if img_path is None:
        raise DataError(f"image file for {sample_id!r} not found in {root / 'images'}")
    gt_path = _find(root / "gt", sample_id)
    if gt_path is None:
        raise DataError(f"ground-truth file for {sample_id!r} not found in {root / 'gt'}")
    image, gt = read_image(img_path), read_mask(gt_path)
    if gt.shape != image.shape[1:]:
        raise DataError(f"{sample_id}: image is {image.shape[1:]}, ground truth is {gt.shape}")
    fov_path = _find(root / "fov", sample_id) if manifest.has_fov_masks else None
    if fov_path is not None:
        fov = read_mask(fov_path)
        if fov.shape != gt.shape:
            raise DataError(f"{sample_id}: FOV mask is {fov.shape}, expected {gt.shape}")
    else:
        fov = make_fov(image)
    return Sample(image, gt, fov, sample_id)


# -- geometry ----------------------------------------------------------------------


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment
    return np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)


def resize(arr: np.ndarray, size=TARGET_SIZE, kind: str = "image") -> np.ndarray:
    """Rescale the last two axes to ``size`` (int or (h, w)).

    Bilinear for images, nearest-neighbour for masks. The aspect ratio is
    not preserved.
    """
    h_out, w_out = (size, size) if np.isscalar(size) else size
    h_in, w_in = arr.shape[-2:]
    if h_in == 0 or w_in == 0:
        raise ValueError("cannot resize an empty array")
    if (h_in, w_in) == (h_out, w_out):
        return arr.copy()
    if kind == "mask":
        ri = np.minimum(((np.arange(h_out) + 0.5) * h_in / h_out).astype(int), h_in - 1)
        ci = np.minimum(((np.arange(w_out) + 0.5) * w_in / w_out).astype(int), w_in - 1)
        return arr[..., ri[:, None], ci[None, :]]
    if kind != "image":
        raise ValueError("kind must be 'image' or 'mask'")
    ys, xs = _source_coords(h_out, h_in), _source_coords(w_out, w_in)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h_in - 1), np.minimum(x0 + 1, w_in - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    a = arr.astype(np.float32)
    top = a[..., y0[:, None], x0[None, :]] * (1 - wx) + a[..., y0[:, None], x1[None, :]] * wx
    bot = a[..., y1[:, None], x0[None, :]] * (1 - wx) + a[..., y1[:, None], x1[None, :]] * wx
    return (top * (1 - wy) + bot * wy).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def resize_to_512(arr: np.ndarray, kind: str = "image") -> np.ndarray:
    return resize(arr, TARGET_SIZE, kind)


@functools.lru_cache(maxsize=64)
def _rotation_coords(h: int, w: int, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel (counter-clockwise on screen)
    src_r = cy + (r - cy) * np.cos(theta) + (c - cx) * np.sin(theta)
    src_c = cx - (r - cy) * np.sin(theta) + (c - cx) * np.cos(theta)
    coords = np.stack([src_r, src_c])
    # cos(90 deg) is 6e-17, not 0; snap so edge pixels stay on the canvas
    nearest = np.rint(coords)
    coords = np.where(np.abs(coords - nearest) < 1e-9, nearest, coords)
    coords.setflags(write=False)
    return coords


def rotate(arr: np.ndarray, degrees: float, kind: str = "image") -> np.ndarray:
    """Rotate the last two axes counter-clockwise about the image centre.

    Bilinear for images, nearest for masks; pixels mapped from outside the
    canvas are 0.
    """
    if degrees % 360 == 0:
        return arr.copy()
    order = {"image": 1, "mask": 0}[kind]
    coords = _rotation_coords(arr.shape[-2], arr.shape[-1], float(degrees))
    flat = arr.reshape((-1,) + arr.shape[-2:])
    out = np.stack([ndimage.map_coordinates(p, coords, order=order, mode="constant", cval=0) for p in flat])
    return out.reshape(arr.shape).astype(arr.dtype)


def contrast_adjust(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale each channel about its mean by ``factor``, clamped to [0, 1]."""
    if factor == 1.0:
        return image.copy()
    mean = image.mean(axis=(-2, -1), keepdims=True)
    return np.clip(mean + factor * (image - mean), 0.0, 1.0).astype(image.dtype)


# -- FOV -----------------------------------------------------------------------------


def _disc(diameter: int) -> np.ndarray:
    r = (diameter - 1) / 2.0
    y, x = np.mgrid[0:diameter, 0:diameter]
    return (y - r) ** 2 + (x - r) ** 2 <= r**2 + 1e-9


def make_fov(image: np.ndarray) -> np.ndarray:
    """Synthesize a field-of-view mask for datasets that ship none.

    Largest connected component with luminance above 0.06, closed with a
    5-pixel disc; the full frame if that component covers under 30%.
    """
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    labels, n = ndimage.label(lum > FOV_LUMINANCE)
    full = np.ones(lum.shape, np.uint8)
    if n == 0:
        return full
    sizes = np.bincount(labels.ravel())[1:]
    biggest = labels == (int(np.argmax(sizes)) + 1)
    if biggest.mean() < FOV_MIN_COVERAGE:
        return full
    disc = _disc(FOV_CLOSING_DIAMETER)
    closed = ndimage.binary_dilation(biggest, disc)
    closed = ndimage.binary_erosion(closed, disc, border_value=1)
    return closed.astype(np.uint8)


# -- pipeline --------------------------------------------------------------------------


def prepare_sample(sample: Sample, size=TARGET_SIZE) -> Sample:
    """Resize to ``size`` and clip the ground truth to the FOV."""
    fov = resize(sample.fov, size, "mask")
    gt = resize(sample.gt, size, "mask") & fov
    return replace(sample, image=resize(sample.image, size, "image"), gt=gt, fov=fov)


def augment_variant(sample: Sample, degrees: int, factor: float) -> Sample:
    image = rotate(contrast_adjust(sample.image, factor), degrees, "image")
    return replace(
        sample,
        image=image,
        gt=rotate(sample.gt, degrees, "mask"),
        fov=rotate(sample.fov, degrees, "mask"),
        tag=f"rot{degrees:+d}_c{factor:g}",
    )


def augment_grid(sample: Sample) -> list[Sample]:
    """All 38 variants: rotation-major (-90..90 step 10), contrast-minor (0.9, 1.1)."""
    adjusted = {f: contrast_adjust(sample.image, f) for f in CONTRAST_FACTORS}
    out = []
    for deg in ROTATIONS:
        gt, fov = rotate(sample.gt, deg, "mask"), rotate(sample.fov, deg, "mask")
        for f in CONTRAST_FACTORS:
            out.append(replace(sample, image=rotate(adjusted[f], deg, "image"), gt=gt, fov=fov,
                               tag=f"rot{deg:+d}_c{f:g}"))
    return out


class SampleSet(Sequence):
    """Lazily loaded split of a dataset, optionally expanded by the augmentation grid.

    Index ``i`` of an augmented set is variant ``i % 38`` of base image
    ``i // 38``. Base images are decoded and resized once and kept.
    """

    def __init__(self, manifest: DatasetManifest, split: str = "train", size=TARGET_SIZE,
                 augment: bool | None = None):
        if split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        self.manifest = manifest
        self.split = split
        self.ids = manifest.train if split == "train" else manifest.test
        self.size = size
        # test images are never augmented
        self.augment = (split == "train") if augment is None else (augment and split == "train")
        self._base: dict = {}

    def base(self, k: int) -> Sample:
        if k not in self._base:
            self._base[k] = prepare_sample(load_sample(self.manifest, self.ids[k]), self.size)
        return self._base[k]

    def __len__(self) -> int:
        return len(self.ids) * (AUGMENT_FACTOR if self.augment else 1)

    def __getitem__(self, i: int) -> Sample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        if not self.augment:
            return self.base(i)
        k, v = divmod(i, AUGMENT_FACTOR)
        deg = ROTATIONS[v // len(CONTRAST_FACTORS)]
        factor = CONTRAST_FACTORS[v % len(CONTRAST_FACTORS)]
        return augment_variant(self.base(k), deg, factor)

    def __iter__(self):
        if not self.augment:
            for k in range(len(self.ids)):
                yield self.base(k)
            return
        for k in range(len(self.ids)):
            yield from augment_grid(self.base(k))


# -- synthetic data ------------------------------------------------------------------


def synthetic_fundus(size: int = 64, seed: int = 0, n_vessels: int = 5, width: float | None = None) -> Sample:
    """A fake fundus image: bright disc with dark curved vessels.

    The vessel mask doubles as ground truth, the disc as FOV.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = 0.46 * size
    fov = ((yy - c) ** 2 + (xx - c) ** 2 <= radius**2).astype(np.uint8)
    width = max(1.0, size / 40.0) if width is None else width
    gt = np.zeros((size, size), bool)
    for _ in range(n_vessels):
        # quadratic Bezier curve through the disc
        pts = c + rng.uniform(-radius, radius, size=(3, 2))
        t = np.linspace(0, 1, 4 * size)[:, None]
        curve = (1 - t) ** 2 * pts[0] + 2 * (1 - t) * t * pts[1] + t**2 * pts[2]
        w = width * rng.uniform(0.8, 1.6)
        for y, x in curve[:: max(1, len(curve) // (2 * size))]:
            gt |= (yy - y) ** 2 + (xx - x) ** 2 <= w**2
    gt &= fov.astype(bool)
    shade = 0.85 - 0.25 * np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / radius
    base = np.stack([shade, 0.45 * shade, 0.2 * shade])
    base -= 0.35 * gt[None] * np.array([1.0, 0.7, 0.5])[:, None, None]
    base += rng.normal(0, 0.02, size=base.shape)
    image = np.clip(base * fov[None], 0, 1).astype(np.float32)
    return Sample(image, gt.astype(np.uint8), fov, f"synthetic{seed}")


def write_synthetic_dataset(root, name: str = "synthetic", n_train: int = 4, n_test: int = 2,
                            fmt: str = "png", size: int = 64, seed: int = 0,
                            fov_masks: bool = True, native_size: Sequence[int] | None = None) -> DatasetManifest:
    """Write a dataset directory of :func:`synthetic_fundus` images plus its manifest.

    ``native_size`` (h, w) resizes the written files, to mimic datasets whose
    native resolution differs from the training size.
    """
    root = Path(root)
    for sub in ("images", "gt", "fov"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ext = {"tif": ".tif", "ppm": ".ppm", "jpg": ".jpg", "png": ".png"}[fmt]
    ids = [f"{i + 1:02d}" for i in range(n_train + n_test)]
    for i, sid in enumerate(ids):
        s = synthetic_fundus(size, seed + i)
        image, gt, fov = s.image, s.gt, s.fov
        if native_size is not None:
            image = resize(image, tuple(native_size), "image")
            gt, fov = resize(gt, tuple(native_size), "mask"), resize(fov, tuple(native_size), "mask")
        write_image(root / "images" / f"{sid}{ext}", image)
        write_mask(root / "gt" / f"{sid}.png", gt)
        if fov_masks:
            write_mask(root / "fov" / f"{sid}.png", fov)
    h, w = native_size if native_size is not None else (size, size)
    manifest = DatasetManifest(
        name=name, root=root, train=tuple(ids[:n_train]), test=tuple(ids[n_train:]), format=fmt,
        native_resolution=(w, h), has_fov_masks=fov_masks,
    )
    write_manifest(manifest)
    return manifest
