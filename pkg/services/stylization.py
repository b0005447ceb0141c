"""
Style Characterizing Inputs and label-preserving style augmentations.

Families (style label 0 is the clean image):
  1  low-frequency amplitude swap with a procedural reference texture
  2  additive structured brightness noise with sparse flakes (frost/snow)
  3  per-channel mean/std transfer toward a reference texture (AdaIN-like)
  4  colour quantization (cartoon-like)
  5  random affine colour transform: hue rotation + contrast shift
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from errors import ContractError
from models import AugmentParams
from services.domains import DomainDataset, StyleDataset
from services.vit import assemble_patches, image_patches

logger = logging.getLogger(__name__)

FAMILY_NAMES = {1: "fda", 2: "frost", 3: "adain", 4: "cartoon", 5: "color"}


def make_sci(image: np.ndarray, permutation: Sequence[int], patch_size: int) -> np.ndarray:
    """Rearranges the patch grid: output patch j is input patch permutation[j]."""
    image = np.asarray(image)
    channels, size, _ = image.shape
    patches = image_patches(image[None], patch_size)[0]
    permutation = np.asarray(permutation)
    if permutation.shape != (patches.shape[0],) or not np.array_equal(
        np.sort(permutation), np.arange(patches.shape[0])
    ):
        raise ContractError(f"expected a permutation of {patches.shape[0]} patch positions")
    return assemble_patches(patches[permutation][None], channels, size, patch_size)[0]


def make_sci_batch(images: np.ndarray, permutations: np.ndarray, patch_size: int) -> np.ndarray:
    return np.stack([make_sci(img, perm, patch_size) for img, perm in zip(images, permutations)])


def procedural_texture(rng: np.random.Generator, size: int, cells: int, channels: int = 3) -> np.ndarray:
    """Smooth value noise: a coarse random lattice upsampled with cubic splines, two octaves."""
    texture = np.zeros((channels, size, size))
    for octave, weight in ((cells, 0.7), (cells * 2, 0.3)):
        lattice = rng.random((channels, octave, octave))
        texture += weight * ndimage.zoom(lattice, (1, size / octave, size / octave), order=3, mode="wrap")
    return np.clip(texture, 0.0, 1.0)


def reference_bank(params: AugmentParams, size: int, channels: int = 3) -> List[np.ndarray]:
    rng = np.random.default_rng([params.seed, 0xBA4C])
    return [procedural_texture(rng, size, params.texture_cells, channels) for _ in range(params.reference_bank_size)]


def swap_low_frequencies(image: np.ndarray, reference: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return image.copy()
    spectrum = np.fft.fft2(image, axes=(-2, -1))
    amplitude, phase = np.abs(spectrum), np.angle(spectrum)
    ref_amplitude = np.abs(np.fft.fft2(reference, axes=(-2, -1)))
    amplitude = np.fft.fftshift(amplitude, axes=(-2, -1))
    ref_amplitude = np.fft.fftshift(ref_amplitude, axes=(-2, -1))
    cy, cx = image.shape[-2] // 2, image.shape[-1] // 2
    window = (slice(None), slice(cy - radius, cy + radius), slice(cx - radius, cx + radius))
    amplitude[window] = ref_amplitude[window]
    amplitude = np.fft.ifftshift(amplitude, axes=(-2, -1))
    return np.real(np.fft.ifft2(amplitude * np.exp(1j * phase), axes=(-2, -1)))


def frost_noise(image: np.ndarray, rng: np.random.Generator, strength: float, cells: int) -> np.ndarray:
    size = image.shape[-1]
    haze = procedural_texture(rng, size, cells, channels=1)
    flakes = (rng.random((1, size, size)) < 0.03).astype(np.float64)
    flakes = ndimage.uniform_filter(flakes, size=(1, 2, 2)) * 4.0
    return image + strength * (haze - 0.3) + 0.5 * strength * flakes


def adain_transfer(image: np.ndarray, ref_mean: np.ndarray, ref_std: np.ndarray, strength: float) -> np.ndarray:
    mean = image.mean(axis=(-2, -1), keepdims=True)
    std = image.std(axis=(-2, -1), keepdims=True)
    ref_mean = np.asarray(ref_mean, dtype=np.float64).reshape(mean.shape)
    ref_std = np.asarray(ref_std, dtype=np.float64).reshape(std.shape)
    target_mean = (1.0 - strength) * mean + strength * ref_mean
    target_std = (1.0 - strength) * std + strength * ref_std
    scale = np.divide(target_std, std, out=np.ones_like(std), where=std > 0)
    return (image - mean) * scale + target_mean


def quantize(image: np.ndarray, levels: int) -> np.ndarray:
    steps = levels - 1
    return np.round(image * steps) / steps


def color_transform(image: np.ndarray, rng: np.random.Generator, hue_max: float, contrast_range: float) -> np.ndarray:
    angle = rng.uniform(-hue_max, hue_max)
    contrast = 1.0 + rng.uniform(-contrast_range, contrast_range)
    # rotation about the grey axis
    cos, sin = np.cos(angle), np.sin(angle)
    k = np.ones((3, 3)) / 3.0
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3.0)
    rotation = cos * np.eye(3) + sin * cross + (1.0 - cos) * k
    flat = image.reshape(3, -1)
    mean = flat.mean(axis=1, keepdims=True)
    out = contrast * (rotation @ (flat - mean)) + rotation @ mean
    return out.reshape(image.shape)


def augment(
    image: np.ndarray,
    label: int,
    params: AugmentParams,
    index: int = 0,
    bank: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """Applies family `label` (1..5). `index` keys the per-sample random stream."""
    if label not in FAMILY_NAMES:
        raise ValueError(f"unknown augmentation family {label}")
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng([params.seed, label, index])
    if label in (1, 3) and bank is None:
        bank = reference_bank(params, image.shape[-1], image.shape[0])
    if label == 1:
        reference = bank[int(rng.integers(len(bank)))]
        out = swap_low_frequencies(image, reference, params.fda_radius)
    elif label == 2:
        out = frost_noise(image, rng, params.frost_strength, params.texture_cells)
    elif label == 3:
        reference = bank[int(rng.integers(len(bank)))]
        out = adain_transfer(
            image, reference.mean(axis=(-2, -1)), reference.std(axis=(-2, -1)), params.adain_strength
        )
    elif label == 4:
        out = quantize(image, params.quant_levels)
    else:
        out = color_transform(image, rng, params.hue_max, params.contrast_range)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def build_style_dataset(
    dataset: DomainDataset,
    params: AugmentParams,
    seed: int,
    families: Optional[Sequence[int]] = None,
) -> StyleDataset:
    """
    For each sample emits the clean image with style label 0 and one image per
    augmentation family, labelled 1..len(families) in the order given.
    """
    families = list(params.families if families is None else families)
    params = params.model_copy(update={"seed": seed})
    n = len(dataset)
    bank = reference_bank(params, dataset.images.shape[-1], dataset.images.shape[1])
    images, style_labels, rows = [], [], []
    for i in range(n):
        images.append(dataset.images[i].astype(np.float32))
        style_labels.append(0)
        rows.append(i)
        for style_id, family in enumerate(families, start=1):
            images.append(augment(dataset.images[i], family, params, index=i, bank=bank))
            style_labels.append(style_id)
            rows.append(i)
    rows = np.asarray(rows)
    logger.debug("built style dataset: %d samples x %d styles", n, len(families) + 1)
    return StyleDataset(
        images=np.stack(images),
        labels=None if dataset.labels is None else dataset.labels[rows],
        latents=None if dataset.latents is None else dataset.latents[rows],
        style_labels=np.asarray(style_labels, dtype=np.int64),
        meta={"num_styles": len(families) + 1, "families": families, "augment_seed": seed},
    )
