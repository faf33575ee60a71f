"""Procedural face-like test data.

Each identity is a fixed painted pattern inside an elliptical
foreground; variations of that identity re-draw the background, shift
the crop, and jitter brightness and noise. Identity information lives
only in the foreground pattern, the nuisance only in the rest, which is
exactly the structure the multi-scale encoder analysis needs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Low-frequency noise field in [0, 1], size x size."""
    coarse = rng.random((cells, cells))
    img = Image.fromarray((coarse * 255).astype(np.uint8))
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def _identity_pattern(identity_seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-identity foreground pattern [3,H,W] and its elliptical mask [H,W]."""
    rng = np.random.default_rng(identity_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2.0, size / 2.0
    ry = size * rng.uniform(0.28, 0.38)
    rx = size * rng.uniform(0.22, 0.32)
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)

    base = rng.uniform(0.2, 0.8, size=3)[:, None, None] * np.ones((3, size, size))
    for _ in range(4):
        by, bx = rng.uniform(0.3, 0.7, size=2) * size
        br = size * rng.uniform(0.08, 0.2)
        blob = np.exp(-(((yy - by) ** 2 + (xx - bx) ** 2) / (2 * br**2)))
        color = rng.uniform(-0.5, 0.5, size=3)[:, None, None]
        base = base + color * blob
    freq = rng.uniform(0.2, 0.9)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.15 * np.sin(freq * xx + phase) * np.sin(freq * yy - phase)
    base = np.clip(base + stripes, 0.0, 1.0)
    return base, mask


def render_face(
    identity_seed: int, variation_seed: int, size: int = 32
) -> tuple[torch.Tensor, torch.Tensor]:
    """One variation of one identity: (image [3,H,W] in [0,1], mask [H,W])."""
    pattern, mask = _identity_pattern(identity_seed, size)
    rng = np.random.default_rng(variation_seed)

    background = np.stack([_smooth_noise(rng, size) for _ in range(3)])
    image = mask * pattern + (1.0 - mask) * background

    shift_y, shift_x = rng.integers(-3, 4, size=2)
    image = np.roll(image, (shift_y, shift_x), axis=(1, 2))
    shifted_mask = np.roll(mask, (shift_y, shift_x), axis=(0, 1))
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        shifted_mask = shifted_mask[:, ::-1]

    gain = rng.uniform(0.85, 1.15)
    bias = rng.uniform(-0.08, 0.08)
    image = np.clip(gain * image + bias + rng.normal(0, 0.02, image.shape), 0.0, 1.0)
    return (
        torch.from_numpy(np.ascontiguousarray(image)).float(),
        torch.from_numpy(np.ascontiguousarray(shifted_mask)).float(),
    )


def make_identity_dataset(
    num_identities: int,
    variations: int,
    size: int = 32,
    seed: int = 0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Dataset of identities x variations: (images, labels, masks)."""
    images, labels, masks = [], [], []
    for ident in range(num_identities):
        for var in range(variations):
            img, mask = render_face(
                identity_seed=seed * 1_000_003 + ident,
                variation_seed=seed * 7_000_003 + ident * 1000 + var,
                size=size,
            )
            images.append(img)
            labels.append(ident)
            masks.append(mask)
    return torch.stack(images), torch.tensor(labels), torch.stack(masks)


def save_image_png(image: torch.Tensor, path: str | Path) -> None:
    """Write a [3,H,W] float image in [0,1] as PNG (deterministic bytes)."""
    arr = (image.clamp(0, 1) * 255).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def save_mask_png(mask: torch.Tensor, path: str | Path) -> None:
    arr = (mask.clamp(0, 1) * 255).round().byte().numpy()
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    return torch.from_numpy((arr >= 0.5).astype(np.float32))


def export_dataset(
    out_dir: str | Path,
    num_identities: int,
    variations: int,
    size: int = 32,
    seed: int = 0,
) -> Path:
    """Write a synthetic dataset plus its manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    images, labels, masks = make_identity_dataset(num_identities, variations, size, seed)
    records = []
    for i in range(images.shape[0]):
        name = f"id{int(labels[i]):03d}_v{i % variations:02d}"
        image_path = out_dir / "images" / f"{name}.png"
        mask_path = out_dir / "masks" / f"{name}.png"
        save_image_png(images[i], image_path)
        save_mask_png(masks[i], mask_path)
        records.append(
            {"image": str(image_path), "identity": f"id{int(labels[i]):03d}",
             "mask": str(mask_path)}
        )
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest
