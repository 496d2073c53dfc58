"""Corpus manifest: which datasets exist, where their files live, and how
image/mask pairs are formed.

The manifest is a TOML file next to (or above) the data it describes. Paths
are relative to the manifest's directory. One table per dataset:

    [dataset.liver_ct]
    modality = "CT"
    pairing = "filename-stem"        # or "manifest-listed"
    images = "liver_ct/images"
    masks = "liver_ct/masks"
    volumes = "liver_ct/volumes"          # optional, 3-D inputs to slice
    mask_volumes = "liver_ct/mask_volumes"
    axes = [0, 1, 2]                      # slicing axes, default all three

    [dataset.liver_ct.value_map]
    "1" = "liver"
    "2" = "kidney"

    # pairing = "manifest-listed" uses explicit pair entries instead of stems:
    # [[dataset.liver_ct.pairs]]
    # image = "images/a.png"
    # masks = ["masks/a_1.png", "masks/a_2.png"]

value_map keys are mask pixel values written as strings (TOML keys are
always strings); values are the raw label names fed to harmonization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ManifestError

PAIRING_RULES = ("filename-stem", "manifest-listed")
MODALITIES = ("CT", "MRI", "X-ray", "Ultrasound", "Endoscopy", "Dermoscopy", "Fundus")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    modality: str
    pairing: str
    images_dir: str
    masks_dir: str
    value_map: dict = field(default_factory=dict)
    volumes_dir: str | None = None
    mask_volumes_dir: str | None = None
    axes: tuple = (0, 1, 2)
    pairs: tuple = ()  # (image_rel, (mask_rel, ...)) entries for manifest-listed


@dataclass(frozen=True)
class Manifest:
    root: Path
    datasets: tuple

    def dataset(self, name: str) -> DatasetSpec:
        for ds in self.datasets:
            if ds.name == name:
                return ds
        raise ManifestError(f"no dataset named {name!r}")


def _require_str(table: dict, key: str, context: str) -> str:
    value = table.get(key)
    if not isinstance(value, str) or not value:
        raise ManifestError(f"{context}: {key!r} must be a non-empty string")
    return value


def _parse_value_map(raw: dict, context: str) -> dict:
    value_map = {}
    for key, label in raw.items():
        try:
            pixel = int(key)
        except ValueError:
            raise ManifestError(f"{context}: value_map key {key!r} is not an integer") from None
        if pixel <= 0:
            raise ManifestError(f"{context}: value_map key {pixel} must be positive")
        if not isinstance(label, str) or not label:
            raise ManifestError(f"{context}: value_map[{pixel}] must be a non-empty string")
        value_map[pixel] = label
    return value_map


def parse_manifest(text: str, root: Path) -> Manifest:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ManifestError(f"manifest is not valid TOML: {exc}") from exc
    tables = doc.get("dataset")
    if not isinstance(tables, dict) or not tables:
        raise ManifestError("manifest declares no [dataset.<name>] tables")

    datasets = []
    for name in sorted(tables):
        table = tables[name]
        ctx = f"dataset {name!r}"
        modality = _require_str(table, "modality", ctx)
        if modality not in MODALITIES:
            raise ManifestError(f"{ctx}: unknown modality {modality!r} (expected one of {MODALITIES})")
        pairing = table.get("pairing", "filename-stem")
        if pairing not in PAIRING_RULES:
            raise ManifestError(f"{ctx}: pairing must be one of {PAIRING_RULES}")
        axes = tuple(table.get("axes", (0, 1, 2)))
        if not axes or any(a not in (0, 1, 2) for a in axes) or len(set(axes)) != len(axes):
            raise ManifestError(f"{ctx}: axes must be distinct values from {{0, 1, 2}}")
        pairs = []
        for entry in table.get("pairs", []):
            image = _require_str(entry, "image", f"{ctx} pairs")
            masks = entry.get("masks")
            if not isinstance(masks, list) or not all(isinstance(m, str) for m in masks):
                raise ManifestError(f"{ctx}: pairs entry for {image!r} needs a 'masks' list")
            pairs.append((image, tuple(masks)))
        if pairing == "manifest-listed" and not pairs:
            raise ManifestError(f"{ctx}: manifest-listed pairing requires [[dataset.{name}.pairs]]")
        datasets.append(
            DatasetSpec(
                name=name,
                modality=modality,
                pairing=pairing,
                images_dir=_require_str(table, "images", ctx),
                masks_dir=_require_str(table, "masks", ctx),
                value_map=_parse_value_map(table.get("value_map", {}), ctx),
                volumes_dir=table.get("volumes"),
                mask_volumes_dir=table.get("mask_volumes"),
                axes=axes,
                pairs=tuple(pairs),
            )
        )
    return Manifest(root=root, datasets=tuple(datasets))


def load_manifest(path) -> Manifest:
    # missing/unreadable file raises OSError (an I/O failure, not validation)
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent.resolve())


def _toml_str(value: str) -> str:
    # json string escaping is a valid TOML basic string for our path/label charset
    return json.dumps(value)


def serialize_manifest(manifest: Manifest) -> str:
    """Canonical TOML form, datasets and value_map entries sorted."""
    lines: list[str] = []
    for ds in sorted(manifest.datasets, key=lambda d: d.name):
        lines.append(f"[dataset.{ds.name}]")
        lines.append(f"modality = {_toml_str(ds.modality)}")
        lines.append(f"pairing = {_toml_str(ds.pairing)}")
        lines.append(f"images = {_toml_str(ds.images_dir)}")
        lines.append(f"masks = {_toml_str(ds.masks_dir)}")
        if ds.volumes_dir:
            lines.append(f"volumes = {_toml_str(ds.volumes_dir)}")
        if ds.mask_volumes_dir:
            lines.append(f"mask_volumes = {_toml_str(ds.mask_volumes_dir)}")
        if ds.axes != (0, 1, 2):
            lines.append(f"axes = [{', '.join(str(a) for a in ds.axes)}]")
        if ds.value_map:
            lines.append("")
            lines.append(f"[dataset.{ds.name}.value_map]")
            for pixel in sorted(ds.value_map):
                lines.append(f'"{pixel}" = {_toml_str(ds.value_map[pixel])}')
        for image, masks in ds.pairs:
            lines.append("")
            lines.append(f"[[dataset.{ds.name}.pairs]]")
            lines.append(f"image = {_toml_str(image)}")
            lines.append(f"masks = [{', '.join(_toml_str(m) for m in masks)}]")
        lines.append("")
    return "\n".join(lines)


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(serialize_manifest(manifest), encoding="utf-8", newline="\n")
