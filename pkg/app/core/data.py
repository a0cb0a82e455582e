"""
Paired aerial/ground samples: procedural toy scenes, directory loading and the PNG codec
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from app.core.errors import DataError, ShapeError


logger = logging.getLogger(__name__)

SKY, BUILDING, ROAD, VEGETATION = 0, 1, 2, 3
CLASS_NAMES = ("sky", "building", "road", "vegetation")
PALETTE: Dict[int, Tuple[int, int, int]] = {
    SKY: (70, 130, 180),
    BUILDING: (128, 64, 128),
    ROAD: (128, 128, 128),
    VEGETATION: (107, 142, 35),
}
COLOR_TO_CLASS = {color: cls for cls, color in PALETTE.items()}

TOY_SIZES = (32, 64)
TOY_COLUMNS = 4
SKY_PLACEHOLDER = (150, 180, 210)
ROAD_COLOR = (90, 90, 90)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")
LAYOUTS = ("side-by-side", "split-folders")


@dataclass
class PairedSample:
    """
    One aerial/ground pair. Images are (3, H, W) in [-1, 1], semantic maps
    one-hot (S, H, W).
    """
    id: str
    aerial: np.ndarray
    ground: np.ndarray
    ground_semantic: np.ndarray
    scene_label: int
    aerial_semantic: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.ground.shape[-1]

    @property
    def ground_semantic_image(self) -> np.ndarray:
        return semantic_to_colors(self.ground_semantic)


# ---------------------------------------------------------------- semantics

def labels_to_onehot(labels: np.ndarray, classes: int = len(PALETTE)) -> np.ndarray:
    return (np.arange(classes)[:, None, None] == labels[None]).astype(np.float64)


def semantic_to_colors(onehot: np.ndarray) -> np.ndarray:
    """(S, H, W) one-hot to an (H, W, 3) uint8 palette image"""
    labels = onehot.argmax(axis=0)
    table = np.array([PALETTE[c] for c in range(len(PALETTE))], dtype=np.uint8)
    return table[labels]


def colors_to_labels(rgb: np.ndarray, source: str = "") -> np.ndarray:
    """(H, W, 3) palette image to class ids; unknown colours raise with their pixel position"""
    labels = np.full(rgb.shape[:2], -1, dtype=np.int64)
    for color, cls in COLOR_TO_CLASS.items():
        labels[np.all(rgb == np.array(color, dtype=rgb.dtype), axis=-1)] = cls
    unknown = np.argwhere(labels < 0)
    if len(unknown):
        y, x = (int(v) for v in unknown[0])
        raise DataError(
            f"{source}: colour {tuple(int(c) for c in rgb[y, x])} at pixel (y={y}, x={x}) is not in the palette "
            f"({len(unknown)} unknown pixels)"
        )
    return labels


def semantic_planes(onehot: np.ndarray) -> np.ndarray:
    """One-hot {0, 1} to network range {-1, 1}"""
    return 2.0 * onehot - 1.0


def dominant_class(labels: np.ndarray, classes: int = len(PALETTE)) -> int:
    """Most frequent class; ties go to the lower id"""
    return int(np.bincount(labels.reshape(-1), minlength=classes).argmax())


# ---------------------------------------------------------------- toy scenes

def _to_unit(rgb: np.ndarray) -> np.ndarray:
    return rgb.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def gen_toy_pair(seed: int, size: int, classes: int = 4) -> PairedSample:
    """
    Procedural street scene seen from above and from street level.

    The scene is TOY_COLUMNS columns, each a building, a vegetation patch or
    open road. The aerial view shows roofs/canopies as blocks in the middle
    rows of each column with a sky-placeholder strip along the far edge; the
    ground view projects the same columns as façades under a sky band, above
    a road band. A building's roof colour in the aerial view is its façade
    colour in the ground view.
    """
    if size not in TOY_SIZES:
        raise DataError(f"Unsupported toy size {size}, expected one of {TOY_SIZES}")
    if classes != len(PALETTE):
        raise DataError(f"Toy scenes have exactly {len(PALETTE)} semantic classes, got {classes}")
    rng = np.random.default_rng(seed)
    s = size
    cw = s // TOY_COLUMNS
    horizon = int(rng.integers(s // 2, 3 * s // 4 + 1))

    aerial = np.empty((s, s, 3), dtype=np.uint8)
    aerial[:] = ROAD_COLOR
    aerial_labels = np.full((s, s), ROAD, dtype=np.int64)
    aerial[: s // 4] = SKY_PLACEHOLDER
    aerial_labels[: s // 4] = SKY

    ground = np.empty((s, s, 3), dtype=np.uint8)
    ground[:horizon] = PALETTE[SKY]
    ground[horizon:] = ROAD_COLOR
    ground_labels = np.full((s, s), SKY, dtype=np.int64)
    ground_labels[horizon:] = ROAD

    kinds = rng.choice([BUILDING, BUILDING, VEGETATION, ROAD], size=TOY_COLUMNS)
    for j, kind in enumerate(kinds):
        x0, x1 = j * cw + 1, (j + 1) * cw - 1
        if kind == BUILDING:
            color = tuple(int(c) for c in rng.integers(40, 230, size=3))
            height = int(rng.integers(s // 4, horizon - 1))
            aerial[s // 4 + 2: 3 * s // 4, x0:x1] = color
            aerial_labels[s // 4 + 2: 3 * s // 4, x0:x1] = BUILDING
            ground[horizon - height: horizon, x0:x1] = color
            ground_labels[horizon - height: horizon, x0:x1] = BUILDING
        elif kind == VEGETATION:
            shade = int(rng.integers(-20, 21))
            color = tuple(int(np.clip(c + shade, 0, 255)) for c in PALETTE[VEGETATION])
            height = int(rng.integers(s // 8, s // 2 + 1))
            aerial[s // 2: 3 * s // 4, x0:x1] = color
            aerial_labels[s // 2: 3 * s // 4, x0:x1] = VEGETATION
            ground[horizon - height: horizon, x0:x1] = color
            ground_labels[horizon - height: horizon, x0:x1] = VEGETATION

    return PairedSample(
        id=f"toy_{seed:06d}",
        aerial=_to_unit(aerial),
        ground=_to_unit(ground),
        ground_semantic=labels_to_onehot(ground_labels, classes),
        scene_label=dominant_class(ground_labels, classes),
        aerial_semantic=labels_to_onehot(aerial_labels, classes),
    )


def toy_dataset(count: int, size: int, seed: int = 0) -> List[PairedSample]:
    return [gen_toy_pair(seed + i, size) for i in range(count)]


def select_fraction(samples: Sequence[PairedSample], fraction: float, seed: int = 0) -> List[PairedSample]:
    """Fixed random subset, original order kept"""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not samples:
        return []
    count = max(1, int(round(len(samples) * fraction)))
    keep = np.sort(np.random.default_rng(seed).permutation(len(samples))[:count])
    return [samples[i] for i in keep]


# ---------------------------------------------------------------- image codec

def quantize(image: np.ndarray) -> np.ndarray:
    """[-1, 1] to uint8 with round-half-away-from-zero"""
    v = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def encode_image(image: np.ndarray, path: str) -> None:
    """Write a (3, H, W) [-1, 1] tensor as a lossless 8-bit PNG"""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"encode_image: expected (3, H, W), got {image.shape}")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(quantize(image).transpose(1, 2, 0))).save(path, format="PNG")


def _read_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "P"):
                raise DataError(f"{path}: expected 3 colour channels, got mode {img.mode}")
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except DataError:
        raise
    except (OSError, SyntaxError, ValueError) as e:
        raise DataError(f"Cannot read image {path}: {e}") from e


def decode_image(path: str) -> np.ndarray:
    """PNG to a (3, H, W) tensor in [-1, 1]"""
    return _to_unit(_read_rgb(path))


def write_sample_grid(path: str, panels: Sequence[np.ndarray]) -> None:
    """Panels side by side, each (3, H, W)"""
    encode_image(np.concatenate([np.clip(p, -1.0, 1.0) for p in panels], axis=2), path)


def write_toy_dataset(root: str, count: int, size: int, seed: int = 0) -> List[str]:
    """Materialise toy pairs in the side-by-side layout"""
    ids = []
    for sample in toy_dataset(count, size, seed):
        name = f"{sample.id}.png"
        encode_image(np.concatenate([sample.aerial, sample.ground], axis=2), os.path.join(root, "pairs", name))
        for folder, onehot in (("semantic", sample.ground_semantic), ("semantic_aerial", sample.aerial_semantic)):
            target = os.path.join(root, folder, name)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            Image.fromarray(semantic_to_colors(onehot)).save(target, format="PNG")
        ids.append(sample.id)
    logger.info(f"Wrote {len(ids)} toy pairs ({size}x{size}) to {root}")
    return ids


# ---------------------------------------------------------------- directory loading

def _resize(rgb: np.ndarray, size: int, resample) -> np.ndarray:
    if rgb.shape[0] == size and rgb.shape[1] == size:
        return rgb
    return np.asarray(Image.fromarray(np.ascontiguousarray(rgb)).resize((size, size), resample=resample), dtype=np.uint8)


def _image_files(folder: str) -> List[str]:
    if not os.path.isdir(folder):
        return []
    return sorted(f for f in os.listdir(folder) if f.lower().endswith(IMAGE_EXTENSIONS))


def _semantic(path: str, size: int, classes: int) -> Tuple[np.ndarray, np.ndarray]:
    labels = colors_to_labels(_read_rgb(path), source=path)
    if labels.shape != (size, size):
        resized = Image.fromarray(labels.astype(np.uint8)).resize((size, size), resample=Image.Resampling.NEAREST)
        labels = np.asarray(resized, dtype=np.int64)
    return labels_to_onehot(labels, classes), labels


def _twin(folder: str, name: str, kind: str) -> str:
    path = os.path.join(folder, name)
    if not os.path.isfile(path):
        raise DataError(f"Missing {kind} twin for '{name}': expected {path}")
    return path


def detect_layout(root: str) -> str:
    if os.path.isdir(os.path.join(root, "aerial")) and os.path.isdir(os.path.join(root, "ground")):
        return "split-folders"
    return "side-by-side"


def load_pairs(root: str, layout: Optional[str] = None, size: int = 64, classes: int = len(PALETTE)) -> Iterator[PairedSample]:
    """
    Stream samples in lexicographic file order.

    side-by-side: root/pairs/*.png holds 2W x H images (aerial left, ground
    right) and root/semantic/ the ground semantic maps with the same names.
    split-folders: root/aerial/, root/ground/ and root/semantic/. Either layout
    may add root/semantic_aerial/ for the ground-to-aerial direction.
    """
    if not os.path.isdir(root):
        raise DataError(f"Data directory not found: {root}")
    layout = layout or detect_layout(root)
    if layout not in LAYOUTS:
        raise DataError(f"Unknown layout '{layout}', expected one of {LAYOUTS}")

    image_folder = os.path.join(root, "pairs" if layout == "side-by-side" else "ground")
    if layout == "side-by-side" and not os.path.isdir(image_folder):
        image_folder = root
    semantic_folder = os.path.join(root, "semantic")
    aerial_semantic_folder = os.path.join(root, "semantic_aerial")

    count = 0
    for name in _image_files(image_folder):
        path = os.path.join(image_folder, name)
        if layout == "side-by-side":
            both = _read_rgb(path)
            h, w2 = both.shape[:2]
            if w2 != 2 * h:
                raise DataError(f"{path}: side-by-side image must be 2W x H, got {w2}x{h}")
            aerial_rgb, ground_rgb = both[:, :h], both[:, h:]
        else:
            ground_rgb = _read_rgb(path)
            aerial_rgb = _read_rgb(_twin(os.path.join(root, "aerial"), name, "aerial"))

        ground_semantic, ground_labels = _semantic(_twin(semantic_folder, name, "semantic"), size, classes)
        aerial_semantic = None
        if os.path.isfile(os.path.join(aerial_semantic_folder, name)):
            aerial_semantic, _ = _semantic(os.path.join(aerial_semantic_folder, name), size, classes)

        count += 1
        yield PairedSample(
            id=os.path.splitext(name)[0],
            aerial=_to_unit(_resize(aerial_rgb, size, Image.Resampling.BILINEAR)),
            ground=_to_unit(_resize(ground_rgb, size, Image.Resampling.BILINEAR)),
            ground_semantic=ground_semantic,
            scene_label=dominant_class(ground_labels, classes),
            aerial_semantic=aerial_semantic,
        )
    logger.info(f"Loaded {count} pairs from {root} ({layout}, {size}x{size})")


# ---------------------------------------------------------------- batching

class Batch(NamedTuple):
    """Source view, target view and target semantics for one direction"""
    source: np.ndarray
    target: np.ndarray
    semantic: np.ndarray
    labels: np.ndarray
    ids: Tuple[str, ...]


def make_batch(samples: Sequence[PairedSample], direction: str = "a2g", dtype=np.float64) -> Batch:
    """a2g: aerial -> ground under ground semantics; g2a swaps the views"""
    if not samples:
        raise DataError("Cannot build a batch from zero samples")
    if direction == "a2g":
        source = [s.aerial for s in samples]
        target = [s.ground for s in samples]
        semantic = [s.ground_semantic for s in samples]
    elif direction == "g2a":
        missing = [s.id for s in samples if s.aerial_semantic is None]
        if missing:
            raise DataError(f"g2a needs aerial semantic maps; missing for {missing[:3]}")
        source = [s.ground for s in samples]
        target = [s.aerial for s in samples]
        semantic = [s.aerial_semantic for s in samples]
    else:
        raise ValueError(f"Unknown direction '{direction}'")
    return Batch(
        source=np.stack(source).astype(dtype),
        target=np.stack(target).astype(dtype),
        semantic=semantic_planes(np.stack(semantic)).astype(dtype),
        labels=np.array([s.scene_label for s in samples], dtype=np.int64),
        ids=tuple(s.id for s in samples),
    )
