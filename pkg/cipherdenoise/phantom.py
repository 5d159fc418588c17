"""Synthetic ellipse phantoms with image-domain dose noise."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cipherdenoise.errors import StorageError
from cipherdenoise.imageio import write_pgm

logger = logging.getLogger(__name__)

# noise sigma is given in 8-bit grey levels
SIGMA_SCALE = 255.0


def psnr(reference: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical images."""
    mse = float(np.mean((np.asarray(reference, np.float64) - np.asarray(test, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ellipse_phantom(size: int, rng: np.random.Generator, ellipses: int = 6) -> np.ndarray:
    """A body ellipse with random interior ellipses, intensities in [0, 1]."""
    yy, xx = np.mgrid[-1.0 : 1.0 : size * 1j, -1.0 : 1.0 : size * 1j]
    image = np.zeros((size, size))
    body = (xx / 0.9) ** 2 + (yy / 0.75) ** 2 <= 1.0
    image[body] = 0.4
    for _ in range(ellipses):
        cx, cy = rng.uniform(-0.5, 0.5, 2)
        ax, ay = rng.uniform(0.05, 0.3, 2)
        theta = rng.uniform(0.0, math.pi)
        value = rng.uniform(-0.2, 0.5)
        cos, sin = math.cos(theta), math.sin(theta)
        u = (xx - cx) * cos + (yy - cy) * sin
        v = -(xx - cx) * sin + (yy - cy) * cos
        image[((u / ax) ** 2 + (v / ay) ** 2 <= 1.0) & body] += value
    return np.clip(image, 0.0, 1.0)


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson thinning at a dose matched to ``sigma`` plus additive Gaussian noise."""
    if sigma <= 0:
        return image.copy()
    level = sigma / SIGMA_SCALE
    photons = 1.0 / level**2
    counted = rng.poisson(image * photons) / photons
    noisy = counted + rng.normal(0.0, level / 2.0, image.shape)
    return np.clip(noisy, 0.0, 1.0)


@dataclass(frozen=True)
class PhantomPair:
    clean: np.ndarray
    noisy: np.ndarray


def generate_pairs(count: int, size: int, sigma: float, seed: int = 0) -> list[PhantomPair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        clean = ellipse_phantom(size, rng)
        pairs.append(PhantomPair(clean, add_noise(clean, sigma, rng)))
    return pairs


def write_pairs(pairs: list[PhantomPair], out_dir: str | Path) -> list[tuple[Path, Path]]:
    """``phantom_NNNN_clean.pgm`` / ``phantom_NNNN_noisy.pgm`` per pair."""
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {directory}: {exc}") from exc
    written = []
    for index, pair in enumerate(pairs):
        clean_path = directory / f"phantom_{index:04d}_clean.pgm"
        noisy_path = directory / f"phantom_{index:04d}_noisy.pgm"
        write_pgm(clean_path, pair.clean)
        write_pgm(noisy_path, pair.noisy)
        written.append((clean_path, noisy_path))
    logger.info("[cipherdenoise] Wrote %d phantom pairs to %s", len(pairs), directory)
    return written
