"""Patch tiling and frozen-backbone feature extraction.

A patch of `spot_px` pixels is cut around each spot center, resized to
`patch_size` when the two differ, normalized, and pushed through a frozen
torchvision backbone with its classification head removed.  Features are
the global-average-pooled penultimate activations.  With `weights=seeded`
the backbone keeps its seeded random initialization, which makes runs
fully reproducible without any download; `weights=pretrained` fetches the
published ImageNet weights instead.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .bmat import write_bmat, write_manifest, write_text_list, sha256_file
from .errors import FormatError, ValidationError
from .spots import Spot, read_spot_table

MODEL_NAMES = ("resnet18", "resnet34", "resnet50")
WEIGHT_MODES = ("seeded", "pretrained")

# ImageNet channel statistics; required for pretrained weights, harmless
# (fixed affine map) for seeded ones.
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image ({exc})") from exc


def crop_patches(
    image: Image.Image,
    spots: list[Spot],
    patch_size: int,
    spot_px: int,
) -> tuple[np.ndarray, list[Spot], list[str]]:
    """Cut spot-centered squares; out-of-bounds spots are skipped, not clipped.

    Returns patches scaled to [0, 1] as (n, patch_size, patch_size, 3),
    the kept spots in table order, and the skipped spot ids.
    """
    if patch_size < 1 or spot_px < 1:
        raise ValidationError(
            f"patch_size and spot_px must be >= 1, got {patch_size}, {spot_px}"
        )
    width, height = image.size
    half = spot_px // 2
    kept: list[Spot] = []
    skipped: list[str] = []
    arrays: list[np.ndarray] = []
    for spot in spots:
        left = int(round(spot.x)) - half
        top = int(round(spot.y)) - half
        if left < 0 or top < 0 or left + spot_px > width or top + spot_px > height:
            skipped.append(spot.spot_id)
            continue
        patch = image.crop((left, top, left + spot_px, top + spot_px))
        if spot_px != patch_size:
            patch = patch.resize((patch_size, patch_size), Image.BILINEAR)
        arrays.append(np.asarray(patch, dtype=np.float32) / 255.0)
        kept.append(spot)
    if arrays:
        stacked = np.stack(arrays)
    else:
        stacked = np.zeros((0, patch_size, patch_size, 3), dtype=np.float32)
    return stacked, kept, skipped


def load_backbone(name: str, weights: str, seed: int) -> tuple[torch.nn.Module, int]:
    """Frozen eval-mode backbone with the classifier replaced by identity."""
    from torchvision import models

    if name not in MODEL_NAMES:
        raise ValidationError(f"model {name!r} not in {MODEL_NAMES}")
    if weights not in WEIGHT_MODES:
        raise ValidationError(f"weights {weights!r} not in {WEIGHT_MODES}")
    torch.manual_seed(seed)
    if weights == "pretrained":
        try:
            model = models.get_model(name, weights="DEFAULT")
        except Exception as exc:
            raise FormatError(
                f"could not fetch pretrained weights for {name} ({exc}); "
                "use --weights seeded for an offline run"
            ) from exc
    else:
        model = models.get_model(name, weights=None)
    d_img = int(model.fc.in_features)
    model.fc = torch.nn.Identity()
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model, d_img


def run_backbone(
    model: torch.nn.Module, patches: np.ndarray, d_img: int, batch_size: int
) -> np.ndarray:
    """Batched forward pass; row order always follows the input order."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    n = patches.shape[0]
    if n == 0:
        return np.zeros((0, d_img), dtype=np.float32)
    normalized = (patches - CHANNEL_MEAN) / CHANNEL_STD
    tensor = torch.from_numpy(np.ascontiguousarray(normalized.transpose(0, 3, 1, 2)))
    torch.use_deterministic_algorithms(True)
    chunks: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            out = model(tensor[start : start + batch_size])
            chunks.append(out.numpy().astype(np.float32))
    return np.concatenate(chunks, axis=0)


def extract(
    image_path: str | Path,
    spots_path: str | Path,
    out_dir: str | Path,
    model_name: str = "resnet50",
    weights: str = "seeded",
    seed: int = 0,
    patch_size: int = 224,
    spot_px: int | None = None,
    batch_size: int = 16,
) -> dict:
    """Tile, embed, and write features.bmat + spot_ids.txt + manifest.json."""
    if spot_px is None:
        spot_px = patch_size
    spots = read_spot_table(spots_path)
    image = load_image(image_path)
    patches, kept, skipped = crop_patches(image, spots, patch_size, spot_px)
    model, d_img = load_backbone(model_name, weights, seed)
    features = run_backbone(model, patches, d_img, batch_size)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_bmat(out_dir / "features.bmat", features)
    write_text_list(out_dir / "spot_ids.txt", [s.spot_id for s in kept])

    provenance = {
        "source": "patchfeat",
        "model": model_name,
        "weights": weights,
        "seed": seed,
        "d_img": d_img,
        "patch_size": patch_size,
        "spot_px": spot_px,
        "image": Path(image_path).name,
        "image_sha256": sha256_file(image_path),
        "n_spots": len(kept),
        "skipped": skipped,
    }
    if spot_px != patch_size:
        provenance["resize_method"] = "bilinear"
    manifest_path = write_manifest(
        out_dir,
        {"features": "features.bmat", "spot_ids": "spot_ids.txt"},
        provenance,
    )
    return {
        "manifest": manifest_path,
        "n_rows": int(features.shape[0]),
        "d_img": d_img,
        "skipped": skipped,
    }
