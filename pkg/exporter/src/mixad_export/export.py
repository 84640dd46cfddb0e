"""MVTec-style dataset walking and bundle export.

Expected layout under the dataset root:

    <class>/train/good/*.png
    <class>/test/<defect-or-good>/*.png
    <class>/ground_truth/<defect>/<stem>_mask.png

Images are resized then center-cropped, embedded patch-by-patch by the
chosen encoder, and written as feature bundles plus one manifest. Masks
are max-pooled to the patch grid (any anomalous pixel marks the patch);
the cropped full-resolution masks are kept as PNG sidecars.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .bundle_writer import ManifestBuilder, write_bundle
from .encoders import build_encoder

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ExportError(Exception):
    pass


@dataclass
class ExportSpec:
    dataset_root: str | Path
    out_dir: str | Path
    classes: list[str] | None = None  # None: autodiscover
    resize: int = 448
    crop: int = 392
    encoder_id: str = "proj14-96"
    layer_indices: list[int] = field(default_factory=list)

    def validate(self) -> None:
        if self.crop > self.resize:
            raise ExportError(f"crop {self.crop} larger than resize {self.resize}")
        root = Path(self.dataset_root)
        if not root.is_dir():
            raise ExportError(f"dataset root {root} is not a directory")


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _center_crop(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    left, top = (w - size) // 2, (h - size) // 2
    return img.crop((left, top, left + size, top + size))


def _load_image(path: Path, resize: int, crop: int) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise ExportError(f"unreadable image {path}: {exc}") from exc
    img = img.resize((resize, resize), Image.BILINEAR)
    img = _center_crop(img, crop)
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_mask(path: Path, resize: int, crop: int) -> np.ndarray:
    mask = Image.open(path).convert("L")
    mask = mask.resize((resize, resize), Image.NEAREST)
    mask = _center_crop(mask, crop)
    return (np.asarray(mask) > 0).astype(np.uint8)


def _pool_mask_to_grid(mask: np.ndarray, patch: int) -> np.ndarray:
    h, w = mask.shape
    gh, gw = h // patch, w // patch
    blocks = mask[: gh * patch, : gw * patch].reshape(gh, patch, gw, patch)
    return blocks.max(axis=(1, 3)).astype(np.uint8)


def _find_mask(class_dir: Path, defect: str, stem: str) -> Path | None:
    gt = class_dir / "ground_truth" / defect
    if not gt.is_dir():
        return None
    for candidate in (f"{stem}_mask.png", f"{stem}.png", f"{stem}_mask.bmp"):
        if (gt / candidate).exists():
            return gt / candidate
    hits = sorted(gt.glob(f"{stem}*"))
    return hits[0] if hits else None


def discover_classes(root: Path) -> list[str]:
    return sorted(
        p.name for p in root.iterdir() if p.is_dir() and (p / "train" / "good").is_dir()
    )


def export(spec: ExportSpec) -> Path:
    """Export every image as one bundle; returns the manifest path."""
    spec.validate()
    root = Path(spec.dataset_root)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder = build_encoder(spec.encoder_id, spec.layer_indices or None)
    patch = encoder.patch_size
    if spec.crop % patch:
        raise ExportError(f"crop {spec.crop} not divisible by patch size {patch}")
    grid = spec.crop // patch

    classes = spec.classes or discover_classes(root)
    if not classes:
        raise ExportError(f"no classes with train/good under {root}")
    manifest = ManifestBuilder(seed=0)

    for class_id in classes:
        class_dir = root / class_id
        train_dir = class_dir / "train" / "good"
        if not train_dir.is_dir():
            raise ExportError(f"{class_dir}: missing train/good")

        for img_path in _list_images(train_dir):
            image = _load_image(img_path, spec.resize, spec.crop)
            patches, cls, layers = encoder.encode(image)
            rel = f"{class_id}/train_{img_path.stem}.amoe"
            write_bundle(
                out / rel, f"{class_id}/train/good/{img_path.stem}", class_id,
                grid, grid, patches, cls, "normal", layers=layers,
            )
            manifest.add(class_id, "train", rel)

        test_root = class_dir / "test"
        defects = sorted(p.name for p in test_root.iterdir() if p.is_dir()) if test_root.is_dir() else []
        for defect in defects:
            for img_path in _list_images(test_root / defect):
                image = _load_image(img_path, spec.resize, spec.crop)
                patches, cls, layers = encoder.encode(image)
                label = "normal" if defect == "good" else "anomalous"
                mask_grid = None
                if label == "anomalous":
                    mask_path = _find_mask(class_dir, defect, img_path.stem)
                    if mask_path is None:
                        warnings.warn(
                            f"{class_id}/test/{defect}/{img_path.name}: no ground-truth "
                            f"mask found, bundle written without one"
                        )
                    else:
                        full = _load_mask(mask_path, spec.resize, spec.crop)
                        mask_grid = _pool_mask_to_grid(full, patch)
                        sidecar = out / class_id / "masks_fullres" / f"{defect}_{img_path.stem}.png"
                        sidecar.parent.mkdir(parents=True, exist_ok=True)
                        Image.fromarray(full * 255).save(sidecar)
                rel = f"{class_id}/test_{defect}_{img_path.stem}.amoe"
                write_bundle(
                    out / rel, f"{class_id}/test/{defect}/{img_path.stem}", class_id,
                    grid, grid, patches, cls, label, layers=layers, mask=mask_grid,
                )
                manifest.add(class_id, "test", rel, tag=defect)

    manifest_path = out / "manifest.json"
    manifest.save(manifest_path)
    return manifest_path
