"""
Synthetic shape/texture benchmark.

A sample's shape S fixes its goal label. Its background texture Z equals the
shape's paired texture with probability rho (the confounder strength) and is
otherwise uniform over the remaining textures. Two domains that use different
pairing maps share S -> Y but disagree on the S/Z shortcut.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple, Union

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import mutual_info_score

from errors import ConfigurationError, ContractError, EmptyDatasetError
from models import CausalGraphParams

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"CSFTDATA"
DATASET_VERSION = 1
FLAG_LABELS = 1
FLAG_LATENTS = 2
FLAG_STYLE = 4

SHAPES = ("circle", "square", "triangle", "plus", "star")
TEXTURES = ("red", "green", "blue", "stripes", "checker")

_FLAT_COLORS = {
    "red": (0.85, 0.25, 0.2),
    "green": (0.2, 0.7, 0.3),
    "blue": (0.2, 0.3, 0.85),
}
_PATTERN_COLORS = {
    "stripes": ((0.9, 0.85, 0.2), (0.5, 0.2, 0.6)),
    "checker": ((0.2, 0.8, 0.8), (0.15, 0.15, 0.15)),
}


def shape_mask(shape: int, size: int, center: Tuple[float, float], radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - center[0], ys - center[1]
    name = SHAPES[shape]
    if name == "circle":
        return dx**2 + dy**2 <= radius**2
    if name == "square":
        half = 0.8 * radius
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if name == "triangle":
        top = (0.0, -radius)
        left = (-0.87 * radius, 0.5 * radius)
        right = (0.87 * radius, 0.5 * radius)

        def side(a, b):
            return (b[0] - a[0]) * (dy - a[1]) - (b[1] - a[1]) * (dx - a[0])

        s1, s2, s3 = side(top, left), side(left, right), side(right, top)
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    if name == "plus":
        arm = 0.3 * radius
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    theta = np.arctan2(dy, dx) + np.pi / 2
    return np.hypot(dx, dy) <= radius * (0.6 + 0.4 * np.cos(5 * theta))


def texture_image(texture: int, size: int) -> np.ndarray:
    name = TEXTURES[texture]
    if name in _FLAT_COLORS:
        color = np.asarray(_FLAT_COLORS[name])[:, None, None]
        return np.broadcast_to(color, (3, size, size)).copy()
    ys, xs = np.mgrid[0:size, 0:size]
    if name == "stripes":
        pattern = ((xs + ys) // 3) % 2 == 0
    else:
        pattern = ((xs // 4) + (ys // 4)) % 2 == 0
    first, second = (np.asarray(c)[:, None, None] for c in _PATTERN_COLORS[name])
    return np.where(pattern[None], first, second)


def render(shape: int, texture: int, sigma: float, seed: int, size: int = 32) -> np.ndarray:
    """Shape S filled with the complement of texture Z over a Z background, plus pixel noise."""
    if not 0 <= shape < len(SHAPES):
        raise ConfigurationError(f"shape id {shape} out of range [0, {len(SHAPES)})")
    if not 0 <= texture < len(TEXTURES):
        raise ConfigurationError(f"texture id {texture} out of range [0, {len(TEXTURES)})")
    rng = np.random.default_rng(seed)
    center = (size / 2 + rng.uniform(-0.1, 0.1) * size, size / 2 + rng.uniform(-0.1, 0.1) * size)
    radius = rng.uniform(0.25, 0.34) * size
    background = texture_image(texture, size)
    mask = shape_mask(shape, size, center, radius)
    image = np.where(mask[None], 1.0 - background, background)
    if sigma > 0:
        image = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


@dataclass
class DomainDataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    latents: Optional[np.ndarray] = None
    style_labels: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices: np.ndarray) -> "DomainDataset":
        def pick(column):
            return None if column is None else column[indices]

        return type(self)(
            images=self.images[indices],
            labels=pick(self.labels),
            latents=pick(self.latents),
            style_labels=pick(self.style_labels),
            meta=dict(self.meta),
        )

    def split(self, fraction: float) -> Tuple["DomainDataset", "DomainDataset"]:
        cut = int(round(len(self) * fraction))
        order = np.arange(len(self))
        return self.subset(order[:cut]), self.subset(order[cut:])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        yield from iterate_batches(len(self), batch_size, rng)

    def unlabeled(self) -> "UnlabeledDataset":
        return UnlabeledDataset(self.images)


class StyleDataset(DomainDataset):
    @property
    def num_styles(self) -> int:
        return int(self.meta.get("num_styles", int(self.style_labels.max()) + 1))

    def split(self, fraction: float) -> Tuple["StyleDataset", "StyleDataset"]:
        """Cuts between samples so every clean image stays with its stylized copies."""
        per_sample = self.num_styles
        cut = int(round(len(self) // per_sample * fraction)) * per_sample
        order = np.arange(len(self))
        return self.subset(order[:cut]), self.subset(order[cut:])


class UnlabeledDataset:
    """Image-only handle; the adaptation loop only ever sees this."""

    def __init__(self, images: np.ndarray):
        self._images = images

    @property
    def images(self) -> np.ndarray:
        return self._images

    def __len__(self) -> int:
        return int(self._images.shape[0])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        yield from iterate_batches(len(self), batch_size, rng)


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    if n == 0:
        raise EmptyDatasetError("cannot iterate an empty dataset")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def sample_domain(params: CausalGraphParams, n: int) -> DomainDataset:
    if n <= 0:
        raise ContractError("sample_domain needs n > 0")
    if params.num_classes > len(SHAPES):
        raise ConfigurationError(f"only {len(SHAPES)} shapes are available, asked for {params.num_classes}")
    if params.num_styles_z > len(TEXTURES):
        raise ConfigurationError(f"only {len(TEXTURES)} textures are available, asked for {params.num_styles_z}")
    rng = np.random.default_rng(params.seed)
    shapes = rng.integers(0, params.num_classes, size=n)
    paired = (shapes + params.pairing_shift) % params.num_styles_z
    keep = rng.random(n) < params.confounder_strength
    others = (paired + 1 + rng.integers(0, params.num_styles_z - 1, size=n)) % params.num_styles_z
    textures = np.where(keep, paired, others)
    render_seeds = rng.integers(0, 2**31 - 1, size=n)
    images = np.stack(
        [
            render(int(s), int(z), params.noise_sigma, int(seed), params.image_size)
            for s, z, seed in zip(shapes, textures, render_seeds)
        ]
    )
    logger.debug("sampled %d images (rho=%.2f, shift=%d)", n, params.confounder_strength, params.pairing_shift)
    return DomainDataset(
        images=images,
        labels=shapes.astype(np.int64),
        latents=np.stack([shapes, textures], axis=1).astype(np.int64),
        meta={"params": params.model_dump()},
    )


def empirical_mutual_information(shapes: np.ndarray, textures: np.ndarray) -> float:
    """Plug-in estimate of I(S; Z) in nats."""
    return float(mutual_info_score(shapes, textures))


def pixel_classifier_shift(
    source_train: DomainDataset, source_test: DomainDataset, target_test: DomainDataset, seed: int = 0
) -> Dict[str, float]:
    """Trains a linear classifier on raw source pixels and scores it on both domains."""
    classifier = LogisticRegression(C=0.01, max_iter=500, random_state=seed)
    classifier.fit(source_train.images.reshape(len(source_train), -1), source_train.labels)
    source_acc = classifier.score(source_test.images.reshape(len(source_test), -1), source_test.labels)
    target_acc = classifier.score(target_test.images.reshape(len(target_test), -1), target_test.labels)
    return {"source_acc": float(source_acc), "target_acc": float(target_acc), "drop": float(source_acc - target_acc)}


def dataset_bytes(dataset: DomainDataset) -> bytes:
    """
    Binary container (little-endian): magic `CSFTDATA`, u32 version,
    u32 N, C, H, W, u32 column flags (1 labels, 2 latents, 4 style labels),
    then float32 images [N, C, H, W], int32 labels [N], int32 latents [N, 2]
    (S, Z), int32 style labels [N], each present only when flagged.
    """
    n, c, h, w = dataset.images.shape
    flags = 0
    columns = []
    if dataset.labels is not None:
        flags |= FLAG_LABELS
        columns.append(dataset.labels)
    if dataset.latents is not None:
        flags |= FLAG_LATENTS
        columns.append(dataset.latents)
    if dataset.style_labels is not None:
        flags |= FLAG_STYLE
        columns.append(dataset.style_labels)
    chunks = [DATASET_MAGIC, struct.pack("<6I", DATASET_VERSION, n, c, h, w, flags)]
    chunks.append(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    chunks.extend(np.ascontiguousarray(col, dtype="<i4").tobytes() for col in columns)
    return b"".join(chunks)


def save_dataset(path: Union[str, Path], dataset: DomainDataset, sidecar: Optional[Dict[str, Any]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_bytes(dataset))
    meta = {**dataset.meta, **(sidecar or {})}
    Path(f"{path}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_header(path: Union[str, Path]) -> Dict[str, int]:
    with open(path, "rb") as f:
        head = f.read(len(DATASET_MAGIC) + 24)
    if head[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ContractError(f"{path} is not a dataset container")
    version, n, c, h, w, flags = struct.unpack_from("<6I", head, len(DATASET_MAGIC))
    return {"version": version, "count": n, "channels": c, "height": h, "width": w, "flags": flags}


def load_dataset(path: Union[str, Path]) -> DomainDataset:
    path = Path(path)
    blob = path.read_bytes()
    header = read_header(path)
    if header["version"] != DATASET_VERSION:
        raise ContractError(f"unsupported dataset version {header['version']}")
    n, c, h, w, flags = (header[k] for k in ("count", "channels", "height", "width", "flags"))
    offset = len(DATASET_MAGIC) + 24
    size = n * c * h * w
    images = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(n, c, h, w).astype(np.float32)
    offset += 4 * size

    def column(width: int) -> np.ndarray:
        nonlocal offset
        values = np.frombuffer(blob, dtype="<i4", count=n * width, offset=offset).astype(np.int64)
        offset += 4 * n * width
        return values.reshape(n, width) if width > 1 else values

    labels = column(1) if flags & FLAG_LABELS else None
    latents = column(2) if flags & FLAG_LATENTS else None
    style = column(1) if flags & FLAG_STYLE else None
    sidecar = Path(f"{path}.json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    cls = StyleDataset if style is not None else DomainDataset
    return cls(images=images, labels=labels, latents=latents, style_labels=style, meta=meta)


def load_unlabeled(path: Union[str, Path]) -> UnlabeledDataset:
    return load_dataset(path).unlabeled()
