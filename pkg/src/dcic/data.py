"""Image I/O (8-bit PNG/PPM), synthetic corpus generation, and the in-memory
crop bank used by the trainer."""

from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError

IMAGE_EXTENSIONS = (".png", ".ppm")


def load_image(path) -> np.ndarray:
    """Read an 8-bit image file into a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(arr: np.ndarray, path) -> None:
    """Write a (3, H, W) array in [0, 1] as an 8-bit image (format from the
    file extension; .png and .ppm are supported)."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigError(f"expected (3, H, W) image array, got {arr.shape}")
    u8 = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


def list_images(folder) -> List[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"image folder not found: {folder}")
    paths = sorted(p for p in folder.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise FileNotFoundError(f"no {'/'.join(IMAGE_EXTENSIONS)} images in {folder}")
    return paths


def dead_leaves(height: int, width: int, rng: np.random.Generator,
                shapes: int = 90) -> np.ndarray:
    """Synthetic natural-image stand-in: occluding colored disks and boxes
    with a heavy-tailed size distribution, per-leaf shading and band-limited
    grain, light blur and sensor noise.  Deterministic given the generator
    state.

    The shading and grain matter: flat-colored leaves contain structure
    only, which a codec can describe entirely with coarse information.
    Natural images carry both coarse structure and local texture, so each
    leaf gets a linear shade (summarizable coarsely) plus smoothed noise
    grain (compressible fine detail that coarse codes cannot predict).
    Grain strength is bimodal across leaves — some leaves are nearly
    smooth, others clearly textured — mirroring the smooth-sky-vs-foliage
    mix of photographic content."""
    from scipy.ndimage import gaussian_filter
    img = np.empty((3, height, width), dtype=np.float64)
    img[:] = rng.uniform(0.1, 0.9, size=3)[:, None, None]
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(shapes):
        color = rng.uniform(0.0, 1.0, size=3)
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        r = 2.5 * rng.uniform(0.08, 1.0) ** -0.9
        if rng.random() < 0.3:
            ry = r * rng.uniform(0.5, 1.5)
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= r)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        gy, gx = rng.normal(size=2)
        shade = rng.uniform(0.0, 0.3) * (gy * (yy - cy) + gx * (xx - cx)) / (r + 1.0)
        grain = gaussian_filter(rng.normal(size=(height, width)),
                                sigma=rng.uniform(0.8, 2.0))
        if rng.random() < 0.75:
            amplitude = rng.uniform(0.0, 0.012)
        else:
            amplitude = rng.uniform(0.03, 0.09)
        grain *= amplitude / (grain.std() + 1e-9)
        img[:, mask] = np.clip(color[:, None] + shade[mask] + grain[mask],
                               0.0, 1.0)
    img = gaussian_filter(img, sigma=(0.0, 0.6, 0.6))
    img += rng.normal(0.0, 0.008, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_corpus(folder, count: int, height: int, width: int, seed: int) -> List[Path]:
    """Write a deterministic dead-leaves corpus of PNG images into `folder`."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = folder / f"leaves_{i:04d}.png"
        save_image(dead_leaves(height, width, rng), path)
        paths.append(path)
    return paths


class CropBank:
    """A fixed bank of random crops, loaded once and held as a single
    float32 tensor; the trainer samples batches from it by index."""

    def __init__(self, crops: torch.Tensor):
        self.crops = crops

    @classmethod
    def from_folder(cls, folder, count: int, crop_size: int, seed: int) -> "CropBank":
        paths = list_images(folder)
        rng = np.random.default_rng(seed)
        images = [load_image(p) for p in paths]
        for p, im in zip(paths, images):
            if im.shape[1] < crop_size or im.shape[2] < crop_size:
                raise ConfigError(
                    f"{p}: image {im.shape[1]}x{im.shape[2]} smaller than crop {crop_size}")
        out = np.empty((count, 3, crop_size, crop_size), dtype=np.float32)
        for i in range(count):
            im = images[int(rng.integers(len(images)))]
            top = int(rng.integers(im.shape[1] - crop_size + 1))
            left = int(rng.integers(im.shape[2] - crop_size + 1))
            out[i] = im[:, top:top + crop_size, left:left + crop_size]
        return cls(torch.from_numpy(out))

    def __len__(self) -> int:
        return self.crops.shape[0]

    def sample(self, batch_size: int, rng: np.random.Generator) -> torch.Tensor:
        idx = rng.integers(len(self), size=batch_size)
        return self.crops[torch.from_numpy(idx)]

    def chunks(self, chunk_size: int) -> Sequence[torch.Tensor]:
        return torch.split(self.crops, chunk_size)
