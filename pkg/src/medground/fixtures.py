"""Seeded synthetic fixture trees.

The repo carries no medical data; everything the pipeline and its tests
need is generated here from a seed: 2-D image/mask corpora, 3-D volumes,
a 1000-sample corpus with planted defects for QC counting, tiny corpora
with known statistics, feature matrices, and prediction documents. All
writers are deterministic (seeded generator, sorted iteration, gzip with
mtime=0), so two runs with the same seed produce byte-identical trees.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .export import export_coco
from .features import write_matrix
from .grounding import build_prompt, tokenize_prompt
from .ingest import LabelMask, encode_image_png, encode_label_mask, pair_corpus, write_volume
from .manifest import DatasetSpec, Manifest, save_manifest
from .qc import run_qc
from .taxonomy import bundled_taxonomy, bundled_taxonomy_text

SIZE = 64  # fixture images are SIZE x SIZE

# planted defect counts for the qc1000 corpus
QC1000_TOTAL = 1000
QC1000_UNREADABLE = 7
QC1000_UNPAIRED = 13
QC1000_BELOW_AREA = 21
QC1000_UNDEFINED = 4


def _noise_image(rng) -> np.ndarray:
    return rng.integers(0, 256, size=(SIZE, SIZE), dtype=np.uint8)


def _blob(mask: np.ndarray, value: int, x: int, y: int, w: int, h: int) -> None:
    mask[y : y + h, x : x + w] = value


def _save_mask(pixels: np.ndarray, path: Path) -> None:
    encode_label_mask(LabelMask(pixels=pixels, value_map={}), path)


def _dataset_dirs(root: Path, name: str) -> tuple[Path, Path]:
    images = root / name / "images"
    masks = root / name / "masks"
    images.mkdir(parents=True, exist_ok=True)
    masks.mkdir(parents=True, exist_ok=True)
    return images, masks


def _random_rect(rng, min_side: int, max_side: int) -> tuple[int, int, int, int]:
    w = int(rng.integers(min_side, max_side + 1))
    h = int(rng.integers(min_side, max_side + 1))
    x = int(rng.integers(0, SIZE - w))
    y = int(rng.integers(0, SIZE - h))
    return x, y, w, h


def _gen_demo(root: Path, rng) -> Manifest:
    """Two small 2-D datasets exercising multi-mask and multi-component cases."""
    demo = root / "demo"
    ct_images, ct_masks = _dataset_dirs(demo, "demo_ct")
    mri_images, mri_masks = _dataset_dirs(demo, "demo_mri")
    ct_map = {1: "liver", 2: "kidney", 3: "liver tumor"}
    mri_map = {1: "brain", 2: "brain tumor"}

    for i in range(8):
        stem = f"ct_{i:03d}"
        encode_image_png(_noise_image(rng), ct_images / f"{stem}.png")
        if i == 3:
            # two mask files pairing with one image
            for suffix, value in (("a", 1), ("b", 2)):
                mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
                _blob(mask, value, *_random_rect(rng, 9, 16))
                _save_mask(mask, ct_masks / f"{stem}__{suffix}.png")
            continue
        mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
        if i == 4:
            # two disjoint components of the same label
            _blob(mask, 1, 4, 4, 10, 10)
            _blob(mask, 1, 40, 40, 12, 12)
        else:
            _blob(mask, 1, *_random_rect(rng, 9, 16))
            if i % 2 == 0:
                _blob(mask, 2 if i % 4 == 0 else 3, *_random_rect(rng, 9, 14))
        _save_mask(mask, ct_masks / f"{stem}.png")

    for i in range(4):
        stem = f"mri_{i:03d}"
        encode_image_png(_noise_image(rng), mri_images / f"{stem}.png")
        mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
        _blob(mask, 1, *_random_rect(rng, 10, 18))
        if i % 2 == 1:
            _blob(mask, 2, *_random_rect(rng, 9, 12))
        _save_mask(mask, mri_masks / f"{stem}.png")

    manifest = Manifest(
        root=demo,
        datasets=(
            DatasetSpec(
                name="demo_ct",
                modality="CT",
                pairing="filename-stem",
                images_dir="demo_ct/images",
                masks_dir="demo_ct/masks",
                value_map=ct_map,
            ),
            DatasetSpec(
                name="demo_mri",
                modality="MRI",
                pairing="filename-stem",
                images_dir="demo_mri/images",
                masks_dir="demo_mri/masks",
                value_map=mri_map,
            ),
        ),
    )
    save_manifest(manifest, demo / "manifest.toml")
    return manifest


def _gen_volumes(root: Path, rng) -> None:
    """Volume dataset consumed by the ingest subcommand."""
    vol = root / "vol"
    volumes = vol / "vol_ct" / "volumes"
    mask_volumes = vol / "vol_ct" / "mask_volumes"
    volumes.mkdir(parents=True, exist_ok=True)
    mask_volumes.mkdir(parents=True, exist_ok=True)
    for i in range(2):
        shape = (12, 10, 8)
        body = rng.normal(size=shape).astype(np.float32)
        write_volume(volumes / f"vol_{i}.nii.gz", body, voxel_spacing=(1.0, 1.0, 2.5))
        labels = np.zeros(shape, dtype=np.uint8)
        labels[3:9, 2:7, 2:6] = 1
        if i == 1:
            labels[0:3, 0:3, 0:3] = 2
        write_volume(mask_volumes / f"vol_{i}.nii.gz", labels, voxel_spacing=(1.0, 1.0, 2.5))
    manifest = Manifest(
        root=vol,
        datasets=(
            DatasetSpec(
                name="vol_ct",
                modality="CT",
                pairing="filename-stem",
                images_dir="vol_ct/images",
                masks_dir="vol_ct/masks",
                value_map={1: "liver", 2: "kidney"},
                volumes_dir="vol_ct/volumes",
                mask_volumes_dir="vol_ct/mask_volumes",
            ),
        ),
    )
    save_manifest(manifest, vol / "manifest.toml")


def _gen_stats_fixtures(root: Path, rng) -> None:
    # 3 CT + 1 MRI images: modality share must come out CT 75.00%, MRI 25.00%
    modal = root / "stats_modality"
    ct_images, ct_masks = _dataset_dirs(modal, "stats_ct")
    mri_images, mri_masks = _dataset_dirs(modal, "stats_mri")
    for i in range(3):
        encode_image_png(_noise_image(rng), ct_images / f"s_{i}.png")
        mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
        _blob(mask, 1, 8, 8, 12, 12)
        _save_mask(mask, ct_masks / f"s_{i}.png")
    encode_image_png(_noise_image(rng), mri_images / "s_0.png")
    mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
    _blob(mask, 1, 10, 10, 14, 14)
    _save_mask(mask, mri_masks / "s_0.png")
    save_manifest(
        Manifest(
            root=modal,
            datasets=(
                DatasetSpec("stats_ct", "CT", "filename-stem", "stats_ct/images", "stats_ct/masks", {1: "liver"}),
                DatasetSpec("stats_mri", "MRI", "filename-stem", "stats_mri/images", "stats_mri/masks", {1: "brain"}),
            ),
        ),
        modal / "manifest.toml",
    )

    # 2 images carrying 3 and 5 regions: masks/image mean must be exactly 4.00
    masksfx = root / "stats_masks"
    images, masks = _dataset_dirs(masksfx, "stats_masks")
    for i, regions in enumerate((3, 5)):
        encode_image_png(_noise_image(rng), images / f"m_{i}.png")
        mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
        for k in range(regions):
            _blob(mask, 1, 2 + (k % 4) * 15, 2 + (k // 4) * 15, 10, 10)
        _save_mask(mask, masks / f"m_{i}.png")
    save_manifest(
        Manifest(
            root=masksfx,
            datasets=(
                DatasetSpec(
                    "stats_masks", "CT", "filename-stem", "stats_masks/images", "stats_masks/masks", {1: "liver"}
                ),
            ),
        ),
        masksfx / "manifest.toml",
    )


def _gen_qc1000(root: Path, rng) -> None:
    """1000 candidates with planted defects; the four labelled mask values
    are mapped, but value 9's raw string is deliberately not in the taxonomy."""
    base = root / "qc1000"
    images, masks = _dataset_dirs(base, "qc1000")
    value_map = {1: "liver", 2: "kidney", 3: "spleen", 9: "zzz unknown structure"}

    picks = rng.choice(QC1000_TOTAL, size=QC1000_UNREADABLE + QC1000_UNPAIRED + QC1000_BELOW_AREA + QC1000_UNDEFINED, replace=False)
    unreadable = set(picks[:QC1000_UNREADABLE].tolist())
    unpaired = set(picks[QC1000_UNREADABLE : QC1000_UNREADABLE + QC1000_UNPAIRED].tolist())
    below = set(
        picks[
            QC1000_UNREADABLE + QC1000_UNPAIRED : QC1000_UNREADABLE + QC1000_UNPAIRED + QC1000_BELOW_AREA
        ].tolist()
    )
    undefined = set(picks[QC1000_UNREADABLE + QC1000_UNPAIRED + QC1000_BELOW_AREA :].tolist())

    for i in range(QC1000_TOTAL):
        stem = f"img_{i:04d}"
        image_path = images / f"{stem}.png"
        if i in unreadable:
            image_path.write_bytes(b"broken\x00" + rng.integers(0, 256, size=32, dtype=np.uint8).tobytes())
        else:
            encode_image_png(_noise_image(rng), image_path)
        if i in unpaired:
            continue
        mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
        if i in below:
            # single 6x10 region: 60 px of 4096 is under the 1.5% floor
            x = int(rng.integers(0, SIZE - 6))
            y = int(rng.integers(0, SIZE - 10))
            _blob(mask, 1, x, y, 6, 10)
        elif i in undefined:
            _blob(mask, 9, *_random_rect(rng, 10, 14))
        else:
            _blob(mask, int(rng.integers(1, 4)), *_random_rect(rng, 9, 16))
            if i % 5 == 0:
                _blob(mask, int(rng.integers(1, 4)), *_random_rect(rng, 8, 12))
        _save_mask(mask, masks / f"{stem}.png")

    save_manifest(
        Manifest(
            root=base,
            datasets=(
                DatasetSpec("qc1000", "CT", "filename-stem", "qc1000/images", "qc1000/masks", value_map),
            ),
        ),
        base / "manifest.toml",
    )


def _gen_features(root: Path, rng) -> None:
    base = root / "features"
    base.mkdir(parents=True, exist_ok=True)
    prompt = build_prompt(["pneumonia", "nodule", "fracture"])
    span_map = tokenize_prompt(prompt)
    n_regions, dim = 5, 16
    write_matrix(base / "regions_xray.mgf", rng.normal(size=(n_regions, dim)).astype(np.float32))
    write_matrix(base / "tokens_shared.mgf", rng.normal(size=(span_map.num_tokens, dim)).astype(np.float32))
    write_matrix(base / "head_weights.mgf", rng.normal(size=(len(prompt.concepts), dim)).astype(np.float32))
    spans = {"prompt": prompt.text, "concepts": list(prompt.concepts)}
    spans.update(span_map.as_records())
    (base / "spans.json").write_text(json.dumps(spans, indent=2) + "\n", encoding="utf-8")
    boxes = []
    for _ in range(n_regions):
        x, y, w, h = _random_rect(rng, 8, 20)
        boxes.append([x, y, w, h])
    (base / "region_boxes.json").write_text(json.dumps(boxes, indent=2) + "\n", encoding="utf-8")


def _gen_eval_docs(root: Path, rng, demo_manifest: Manifest) -> dict:
    """Ground-truth document exported from the demo corpus plus two
    prediction files: an exact copy and a degraded one."""
    tax = bundled_taxonomy()
    scan = pair_corpus(demo_manifest)
    accepted, _ = run_qc(scan, taxonomy=tax)
    eval_dir = root / "eval"
    preds_dir = root / "preds"
    eval_dir.mkdir(parents=True, exist_ok=True)
    preds_dir.mkdir(parents=True, exist_ok=True)
    doc = export_coco(accepted, tax, eval_dir / "gt.json")

    perfect = [
        {
            "image_id": row["image_id"],
            "category_id": row["category_id"],
            "bbox": row["bbox"],
            "score": 1.0,
        }
        for row in doc.annotations
    ]
    (preds_dir / "perfect.json").write_text(json.dumps(perfect, indent=2) + "\n", encoding="utf-8")

    noisy = []
    sizes = {row["id"]: (row["width"], row["height"]) for row in doc.images}
    for row in doc.annotations:
        if rng.random() < 0.85:
            x, y, w, h = row["bbox"]
            width, height = sizes[row["image_id"]]
            jx, jy = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
            x = min(max(0, x + jx), width - 1)
            y = min(max(0, y + jy), height - 1)
            w = max(1, min(w + int(rng.integers(-2, 3)), width - x))
            h = max(1, min(h + int(rng.integers(-2, 3)), height - y))
            noisy.append(
                {
                    "image_id": row["image_id"],
                    "category_id": row["category_id"],
                    "bbox": [x, y, w, h],
                    "score": round(float(rng.uniform(0.3, 1.0)), 4),
                }
            )
    category_ids = [row["id"] for row in doc.categories]
    for row in doc.images:
        if rng.random() < 0.3:
            x, y, w, h = _random_rect(rng, 6, 18)
            noisy.append(
                {
                    "image_id": row["id"],
                    "category_id": int(rng.choice(category_ids)),
                    "bbox": [x, y, w, h],
                    "score": round(float(rng.uniform(0.05, 0.6)), 4),
                }
            )
    (preds_dir / "noisy.json").write_text(json.dumps(noisy, indent=2) + "\n", encoding="utf-8")
    return {"gt_annotations": len(doc.annotations), "perfect": len(perfect), "noisy": len(noisy)}


def gen_fixtures(out_dir, seed: int = 7) -> dict:
    """Write the full fixture tree under out_dir; returns a summary dict."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    (root / "taxonomy.txt").write_text(bundled_taxonomy_text(), encoding="utf-8", newline="\n")
    demo_manifest = _gen_demo(root, rng)
    _gen_volumes(root, rng)
    _gen_stats_fixtures(root, rng)
    _gen_qc1000(root, rng)
    _gen_features(root, rng)
    eval_summary = _gen_eval_docs(root, rng, demo_manifest)

    summary = {
        "seed": seed,
        "image_size": SIZE,
        "qc1000": {
            "total": QC1000_TOTAL,
            "unreadable": QC1000_UNREADABLE,
            "unpaired": QC1000_UNPAIRED,
            "below_area": QC1000_BELOW_AREA,
            "undefined_label": QC1000_UNDEFINED,
        },
        "eval": eval_summary,
    }
    (root / "SUMMARY.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary
