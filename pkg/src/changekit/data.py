"""Synthetic dataset generation, on-disk layout, and training augmentations.

Disk layout (8-bit PNG, class id = pixel value, 255 = ignore)::

    <root>/dataset.json            num_classes / mode / tile size
    <root>/<split>.txt             one tile id per line
    <root>/<split>/images/<id>.png
    <root>/<split>/masks/<id>.png
    <root>/<split>/images_t2/ masks_t2/ change/    (bitemporal mode only)

The generator renders textured backgrounds plus non-overlapping rectangle
and ellipse objects, with image and mask rasterized from the same object
list, so the mask is consistent with the rendered pixels by construction.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import (
    IGNORE_VALUE,
    BinaryChangeMask,
    ImageTile,
    SemanticMask,
    derive_change,
)
from .pairing import JitterBounds, color_jitter


class DataError(Exception):
    """Dataset layout or content problem; message names the offending tile."""


class PlacementError(DataError):
    """Objects could not be placed without overlap after bounded retries."""


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticWorldConfig:
    tile_size: int = 64
    object_count_range: Tuple[int, int] = (4, 8)
    object_kinds: Tuple[str, ...] = ("rectangle", "ellipse")
    num_classes: int = 2
    background_texture_seed: int = 0
    change_rate: float = 0.5
    channels: int = 3
    min_object_size: int = 6
    max_object_size: int = 18
    shade_range: float = 0.25
    pixel_noise: float = 0.03
    # when set, object classes share one base color and differ from it by
    # at most this much, making the class identity deliberately ambiguous
    class_contrast: float | None = None
    # redraw per-object shades in the second acquisition of eval pairs
    shade_redraw: bool = False
    # fraction of toggled eval objects that change class instead of being
    # removed and replaced elsewhere (multi-class worlds only)
    reclass_rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.change_rate <= 1.0:
            raise ValueError(f"change_rate must be in [0, 1], got {self.change_rate}")
        if self.num_classes < 2:
            raise ValueError("need at least background + 1 object class")
        bad = set(self.object_kinds) - {"rectangle", "ellipse"}
        if bad:
            raise ValueError(f"unknown object kinds: {sorted(bad)}")


@dataclass
class _SceneObject:
    kind: str
    class_id: int
    cy: int
    cx: int
    half_h: int
    half_w: int
    shade: np.ndarray  # per-object, per-channel color offset


@dataclass
class _Scene:
    cfg: SyntheticWorldConfig
    background: np.ndarray  # (C, H, W) float32
    objects: List[_SceneObject]


def _class_color(class_id: int, channels: int, seed: int,
                 contrast: float | None = None) -> np.ndarray:
    # stable colors per class; background is always well separated, object
    # classes cluster around a shared base when a contrast is given
    rng = np.random.default_rng(seed * 1009 + class_id)
    if class_id == 0 or contrast is None:
        return 0.35 + 0.6 * rng.random(channels)
    base = 0.35 + 0.6 * np.random.default_rng(seed * 1009 + 104729).random(channels)
    direction = 2.0 * rng.random(channels) - 1.0
    return np.clip(base + contrast * direction, 0.05, 0.95)


def _object_footprint(obj: _SceneObject, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if obj.kind == "rectangle":
        return (
            (np.abs(yy - obj.cy) <= obj.half_h)
            & (np.abs(xx - obj.cx) <= obj.half_w)
        )
    # ellipse
    return (
        ((yy - obj.cy) / max(obj.half_h, 1)) ** 2
        + ((xx - obj.cx) / max(obj.half_w, 1)) ** 2
    ) <= 1.0


def _make_background(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.tile_size
    low = max(2, size // 8)
    coarse = rng.normal(0.0, 1.0, size=(cfg.channels, low, low))
    zoomed = ndimage.zoom(coarse, (1, size / low, size / low), order=1)[:, :size, :size]
    base = _class_color(0, cfg.channels, cfg.background_texture_seed)[:, None, None]
    return np.clip(base + 0.08 * zoomed, 0.0, 1.0).astype(np.float32)


def _draw_shade(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-cfg.shade_range, cfg.shade_range, cfg.channels)


def _sensor_noise(image: ImageTile, cfg: SyntheticWorldConfig,
                  rng: np.random.Generator) -> ImageTile:
    """Independent per-acquisition pixel noise."""
    if cfg.pixel_noise <= 0:
        return image
    noisy = image.data + rng.normal(0.0, cfg.pixel_noise, image.data.shape)
    return ImageTile(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def _place_objects(cfg: SyntheticWorldConfig, rng: np.random.Generator,
                   count: int, occupied: np.ndarray | None = None,
                   max_retries: int = 200) -> List[_SceneObject]:
    size = cfg.tile_size
    occupied = occupied.copy() if occupied is not None else np.zeros((size, size), bool)
    objects: List[_SceneObject] = []
    for _ in range(count):
        for attempt in range(max_retries + 1):
            if attempt == max_retries:
                raise PlacementError(
                    f"could not place object {len(objects) + 1}/{count} "
                    f"after {max_retries} retries (tile too crowded)"
                )
            kind = cfg.object_kinds[int(rng.integers(len(cfg.object_kinds)))]
            half_h = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1)) // 2
            half_w = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1)) // 2
            half_h, half_w = max(half_h, 2), max(half_w, 2)
            cy = int(rng.integers(half_h, size - half_h))
            cx = int(rng.integers(half_w, size - half_w))
            class_id = (
                1 if cfg.num_classes == 2
                else int(rng.integers(1, cfg.num_classes))
            )
            obj = _SceneObject(kind, class_id, cy, cx, half_h, half_w,
                               shade=_draw_shade(cfg, rng))
            fp = _object_footprint(obj, size)
            # 1-cell margin keeps objects separable in the mask
            if not (occupied & ndimage.binary_dilation(fp)).any():
                occupied |= fp
                objects.append(obj)
                break
    return objects


def _render(scene: _Scene) -> Tuple[ImageTile, SemanticMask]:
    cfg = scene.cfg
    image = scene.background.copy()
    mask = np.zeros((cfg.tile_size, cfg.tile_size), dtype=np.uint8)
    for obj in scene.objects:
        fp = _object_footprint(obj, cfg.tile_size)
        color = _class_color(obj.class_id, cfg.channels, cfg.background_texture_seed,
                             cfg.class_contrast)
        image[:, fp] = np.clip(color[:, None] + obj.shade[:, None], 0.0, 1.0)
        mask[fp] = obj.class_id
    return ImageTile(image), SemanticMask(mask, cfg.num_classes)


def _sample_scene(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> _Scene:
    lo, hi = cfg.object_count_range
    count = int(rng.integers(lo, hi + 1))
    background = _make_background(cfg, rng)
    objects = _place_objects(cfg, rng, count)
    return _Scene(cfg, background, objects)


def gen_single_temporal(
    cfg: SyntheticWorldConfig, n: int, rng: np.random.Generator
) -> List[Tuple[ImageTile, SemanticMask]]:
    """n independent (image, semantic mask) tiles; deterministic given rng."""
    out = []
    for _ in range(n):
        image, mask = _render(_sample_scene(cfg, rng))
        out.append((_sensor_noise(image, cfg, rng), mask))
    return out


@dataclass(frozen=True)
class BitemporalSample:
    image_a: ImageTile
    mask_a: SemanticMask
    image_b: ImageTile
    mask_b: SemanticMask
    change: BinaryChangeMask


# acquisition-condition jitter for eval pairs; same scale as the training
# self-contrast bounds so the radiometric nuisance is matched
_EVAL_JITTER = JitterBounds()


def gen_bitemporal_eval(
    cfg: SyntheticWorldConfig, n: int, rng: np.random.Generator
) -> List[BitemporalSample]:
    """True bitemporal pairs: time 2 toggles a ``change_rate`` fraction of
    objects (remove / re-class / add elsewhere) plus radiometric
    acquisition differences (global jitter, fresh per-object shades,
    independent sensor noise); the stored change mask equals the
    mask-derived change."""
    samples = []
    for _ in range(n):
        scene1 = _sample_scene(cfg, rng)
        objects2 = copy.deepcopy(scene1.objects)
        n_toggle = int(round(cfg.change_rate * len(objects2)))
        toggle_idx = rng.choice(len(objects2), size=n_toggle, replace=False) if n_toggle else []

        removed = 0
        for idx in sorted(toggle_idx, reverse=True):
            obj = objects2[idx]
            if cfg.num_classes > 2 and rng.random() < cfg.reclass_rate:
                choices = [c for c in range(1, cfg.num_classes) if c != obj.class_id]
                obj.class_id = int(rng.choice(choices))
            else:
                del objects2[idx]
                removed += 1

        if removed:
            # re-add the removed count at fresh positions, clear of both epochs
            occupied = np.zeros((cfg.tile_size, cfg.tile_size), bool)
            for obj in scene1.objects + objects2:
                occupied |= _object_footprint(obj, cfg.tile_size)
            try:
                objects2.extend(_place_objects(cfg, rng, removed, occupied))
            except PlacementError:
                pass  # crowded tile: fewer additions is acceptable

        if cfg.shade_redraw:
            # the second acquisition sees the scene under different
            # illumination: every object's shade is redrawn
            for obj in objects2:
                obj.shade = _draw_shade(cfg, rng)
        scene2 = _Scene(cfg, scene1.background, objects2)
        image1, mask1 = _render(scene1)
        image2, mask2 = _render(scene2)
        # both acquisitions carry independent radiometric conditions
        image1 = _sensor_noise(color_jitter(image1, rng, bounds=_EVAL_JITTER), cfg, rng)
        image2 = _sensor_noise(color_jitter(image2, rng, bounds=_EVAL_JITTER), cfg, rng)
        change = BinaryChangeMask(derive_change(mask1, mask2))
        samples.append(BitemporalSample(image1, mask1, image2, mask2, change))
    return samples


# ---------------------------------------------------------------------------
# Training augmentations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    scale_range: Tuple[float, float] = (0.75, 1.25)
    crop_size: int | None = None
    color_jitter: bool = False

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(False, False, False, (1.0, 1.0), None, False)


def _scale(image: np.ndarray, mask: np.ndarray, factor: float) -> Tuple[np.ndarray, np.ndarray]:
    if factor == 1.0:
        return image, mask
    image = ndimage.zoom(image, (1, factor, factor), order=1)
    mask = ndimage.zoom(mask, (factor, factor), order=0)
    h = min(image.shape[1], mask.shape[0])
    w = min(image.shape[2], mask.shape[1])
    return image[:, :h, :w], mask[:h, :w]


def _crop(image: np.ndarray, mask: np.ndarray, size: int,
          rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    _, h, w = image.shape
    if h < size or w < size:
        # pad the short side; padded mask cells are ignore
        ph, pw = max(0, size - h), max(0, size - w)
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE_VALUE)
        _, h, w = image.shape
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return image[:, y0:y0 + size, x0:x0 + size], mask[y0:y0 + size, x0:x0 + size]


def augment_train(
    image: ImageTile, mask: SemanticMask, cfg: AugmentConfig, rng: np.random.Generator
) -> Tuple[ImageTile, SemanticMask]:
    """Seeded training augmentation; geometry is shared by image and mask."""
    img = np.asarray(image.data)
    msk = np.asarray(mask.labels)
    if cfg.crop_size is not None and cfg.crop_size > max(msk.shape):
        if cfg.scale_range[1] * max(msk.shape) < cfg.crop_size:
            raise DataError(
                f"crop size {cfg.crop_size} larger than tile {msk.shape} at any scale"
            )

    if cfg.hflip and rng.random() < 0.5:
        img, msk = img[:, :, ::-1], msk[:, ::-1]
    if cfg.vflip and rng.random() < 0.5:
        img, msk = img[:, ::-1, :], msk[::-1, :]
    if cfg.rot90:
        k = int(rng.integers(4))
        img = np.rot90(img, k, axes=(1, 2))
        msk = np.rot90(msk, k)
    if cfg.scale_range != (1.0, 1.0):
        factor = float(rng.uniform(*cfg.scale_range))
        img, msk = _scale(img.copy(), msk.copy(), factor)
    if cfg.crop_size is not None:
        img, msk = _crop(np.ascontiguousarray(img), np.ascontiguousarray(msk),
                         cfg.crop_size, rng)

    tile = ImageTile(np.ascontiguousarray(img))
    if cfg.color_jitter:
        tile = color_jitter(tile, rng)
    return tile, SemanticMask(np.ascontiguousarray(msk), mask.num_classes, mask.ignore_value)


# ---------------------------------------------------------------------------
# Disk I/O
# ---------------------------------------------------------------------------

def _to_uint8(image: ImageTile) -> np.ndarray:
    arr = np.clip(image.data, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def save_image_png(image: ImageTile, path: Path) -> None:
    arr = _to_uint8(image)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    elif arr.shape[0] == 3:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise DataError(f"PNG export supports 1 or 3 channels, got {arr.shape[0]}")


def load_image_png(path: Path) -> ImageTile:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTile(arr)


def save_mask_png(labels: np.ndarray, path: Path) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def load_mask_png(path: Path, num_classes: int) -> SemanticMask:
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    return SemanticMask(arr, num_classes)


@dataclass
class DatasetManifest:
    root: Path
    splits: dict  # split name -> list of tile ids
    mode: str  # "single_temporal" | "bitemporal"
    num_classes: int
    tile_size: int


def write_dataset(
    root: Path,
    split: str,
    cfg: SyntheticWorldConfig,
    samples_single: Sequence[Tuple[ImageTile, SemanticMask]] | None = None,
    samples_bitemporal: Sequence[BitemporalSample] | None = None,
) -> None:
    """Serialize one split; exactly one of the sample sequences is given."""
    root = Path(root)
    if (samples_single is None) == (samples_bitemporal is None):
        raise ValueError("pass exactly one of samples_single / samples_bitemporal")
    mode = "single_temporal" if samples_single is not None else "bitemporal"
    split_dir = root / split
    for sub in ("images", "masks") + (("images_t2", "masks_t2", "change") if mode == "bitemporal" else ()):
        (split_dir / sub).mkdir(parents=True, exist_ok=True)

    ids = []
    if samples_single is not None:
        for i, (image, mask) in enumerate(samples_single):
            tile_id = f"{split}_{i:05d}"
            save_image_png(image, split_dir / "images" / f"{tile_id}.png")
            save_mask_png(mask.labels, split_dir / "masks" / f"{tile_id}.png")
            ids.append(tile_id)
    else:
        for i, s in enumerate(samples_bitemporal):
            tile_id = f"{split}_{i:05d}"
            save_image_png(s.image_a, split_dir / "images" / f"{tile_id}.png")
            save_mask_png(s.mask_a.labels, split_dir / "masks" / f"{tile_id}.png")
            save_image_png(s.image_b, split_dir / "images_t2" / f"{tile_id}.png")
            save_mask_png(s.mask_b.labels, split_dir / "masks_t2" / f"{tile_id}.png")
            save_mask_png(s.change.values, split_dir / "change" / f"{tile_id}.png")
            ids.append(tile_id)

    (root / f"{split}.txt").write_text("\n".join(ids) + "\n", encoding="utf-8")
    meta_path = root / "dataset.json"
    meta = {"num_classes": cfg.num_classes, "tile_size": cfg.tile_size, "modes": {}}
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    meta["num_classes"] = cfg.num_classes
    meta["tile_size"] = cfg.tile_size
    meta.setdefault("modes", {})[split] = mode
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_manifest(root: Path) -> DatasetManifest:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"no dataset.json under {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    splits = {}
    for list_file in sorted(root.glob("*.txt")):
        split = list_file.stem
        ids = [line.strip() for line in list_file.read_text(encoding="utf-8").splitlines() if line.strip()]
        split_dir = root / split
        for tile_id in ids:
            if not (split_dir / "images" / f"{tile_id}.png").exists():
                raise DataError(f"tile {tile_id!r}: missing image in split {split!r}")
            if not (split_dir / "masks" / f"{tile_id}.png").exists():
                raise DataError(f"tile {tile_id!r}: missing mask in split {split!r}")
            if meta["modes"].get(split) == "bitemporal":
                for sub in ("images_t2", "masks_t2", "change"):
                    if not (split_dir / sub / f"{tile_id}.png").exists():
                        raise DataError(f"tile {tile_id!r}: missing {sub} file in split {split!r}")
        splits[split] = ids
    modes = set(meta["modes"].values())
    mode = "bitemporal" if modes == {"bitemporal"} else meta["modes"].get("train", "single_temporal")
    return DatasetManifest(root, splits, mode, int(meta["num_classes"]), int(meta["tile_size"]))


def split_mode(manifest: DatasetManifest, split: str) -> str:
    meta = json.loads((manifest.root / "dataset.json").read_text(encoding="utf-8"))
    return meta["modes"][split]


def _load_single(manifest: DatasetManifest, split: str, tile_id: str):
    split_dir = manifest.root / split
    image = load_image_png(split_dir / "images" / f"{tile_id}.png")
    mask = load_mask_png(split_dir / "masks" / f"{tile_id}.png", manifest.num_classes)
    if image.spatial_shape != mask.spatial_shape:
        raise DataError(f"tile {tile_id!r}: image/mask shape mismatch")
    return image, mask


def _load_bitemporal(manifest: DatasetManifest, split: str, tile_id: str) -> BitemporalSample:
    split_dir = manifest.root / split
    image_a, mask_a = _load_single(manifest, split, tile_id)
    image_b = load_image_png(split_dir / "images_t2" / f"{tile_id}.png")
    mask_b = load_mask_png(split_dir / "masks_t2" / f"{tile_id}.png", manifest.num_classes)
    change_arr = np.asarray(Image.open(split_dir / "change" / f"{tile_id}.png"), dtype=np.uint8)
    try:
        change = BinaryChangeMask(change_arr)
    except ValueError as exc:
        raise DataError(f"tile {tile_id!r}: bad change mask: {exc}") from exc
    return BitemporalSample(image_a, mask_a, image_b, mask_b, change)


def iterate(
    manifest: DatasetManifest, split: str, batch_size: int, seed: int
) -> Iterator[list]:
    """One deterministic shuffled pass over a split, in batches.

    Single-temporal splits yield lists of (ImageTile, SemanticMask);
    bitemporal splits yield lists of BitemporalSample.
    """
    if split not in manifest.splits:
        raise DataError(f"unknown split {split!r}; have {sorted(manifest.splits)}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = list(manifest.splits[split])
    order = np.random.default_rng(seed).permutation(len(ids))
    mode = split_mode(manifest, split)
    loader = _load_bitemporal if mode == "bitemporal" else _load_single
    batch = []
    for idx in order:
        batch.append(loader(manifest, split, ids[idx]))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch
