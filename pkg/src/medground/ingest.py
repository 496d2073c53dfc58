"""Source-corpus ingestion.

Three concerns live here:

* parsing 3-D volume files (single-file NIfTI-1 layout, optionally gzipped)
  and slicing them into 2-D planes,
* the lossless raster codec for 2-D images and label masks (PNG), and
* scanning a manifest-described directory tree into paired image+mask
  samples with orphan/duplicate reports.

Per-file parsing is pure; scans may decode files in parallel but always
merge results in sorted-path order, so output never depends on the worker
count.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    AmbiguousPairing,
    DecodeFailure,
    DimMismatch,
    EmptyCorpus,
    InvalidAxis,
    MalformedHeader,
    TruncatedInput,
    UnknownLabelValue,
    UnsupportedDatatype,
)
from .manifest import DatasetSpec, Manifest

# --------------------------------------------------------------------------
# Volume files (single-file NIfTI-1 layout)
# --------------------------------------------------------------------------

HEADER_SIZE = 348
_SIZE_FIELD = struct.Struct("<i")
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# header datatype code -> (name, numpy character, bits)
_DATATYPES = {
    2: ("uint8", "u1", 8),
    4: ("int16", "i2", 16),
    16: ("float32", "f4", 32),
}
_DATATYPE_CODES = {name: code for code, (name, _, _) in _DATATYPES.items()}
_NP_CHARS = {name: char for _, (name, char, _) in _DATATYPES.items()}


@dataclass(frozen=True)
class VolumeMeta:
    """Declared geometry of a 3-D volume file."""

    dims: tuple  # (width, height, depth) in voxels
    datatype: str  # "uint8" | "int16" | "float32"
    voxel_spacing: tuple  # (sx, sy, sz) in millimetres, informational
    byte_order: str = "<"
    data_offset: int = HEADER_SIZE + 4

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.byte_order + _NP_CHARS[self.datatype])


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise TruncatedInput(f"gzip stream is broken: {exc}") from exc
    return data


def parse_volume_header(data: bytes) -> VolumeMeta:
    """Parse a raw volume header into VolumeMeta.

    Endianness is auto-detected from the fixed header-size constant (348).
    Only 3-D volumes in the supported {uint8, int16, float32} subset pass;
    anything else raises MalformedHeader or UnsupportedDatatype.
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedInput(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    if _SIZE_FIELD.unpack_from(data, 0)[0] == HEADER_SIZE:
        order = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        order = ">"
    else:
        raise MalformedHeader("header size constant is not 348 in either byte order")

    magic = data[344:348]
    if magic == _MAGIC_PAIR:
        raise MalformedHeader("two-file header+image layout is not supported")
    if magic != _MAGIC_SINGLE:
        raise MalformedHeader(f"bad magic {magic!r}")

    dim = struct.unpack_from(order + "8h", data, 40)
    ndim = dim[0]
    if not 3 <= ndim <= 7:
        raise MalformedHeader(f"dim count must be 3..7, got {ndim}")
    dims = dim[1 : 1 + ndim]
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"non-positive dimension in {dims}")
    if any(d != 1 for d in dims[3:]):
        raise MalformedHeader(f"not a 3-D volume: dims {dims}")

    datatype_code, bitpix = struct.unpack_from(order + "2h", data, 70)
    if datatype_code not in _DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype_code} not in supported subset")
    name, _, bits = _DATATYPES[datatype_code]
    if bitpix != bits:
        raise MalformedHeader(f"bitpix {bitpix} disagrees with datatype {name}")

    pixdim = struct.unpack_from(order + "8f", data, 76)
    (vox_offset,) = struct.unpack_from(order + "f", data, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise MalformedHeader(f"data offset {offset} overlaps the header")

    return VolumeMeta(
        dims=tuple(int(d) for d in dims[:3]),
        datatype=name,
        voxel_spacing=tuple(float(p) for p in pixdim[1:4]),
        byte_order=order,
        data_offset=offset,
    )


def load_volume(path) -> tuple[VolumeMeta, np.ndarray]:
    """Read a volume file (gzip detected by magic) into (meta, (W, H, D) array).

    Voxels are stored x-fastest in the file; the returned array is indexed
    ``vol[x, y, z]`` in native byte order.
    """
    data = _maybe_gunzip(Path(path).read_bytes())
    meta = parse_volume_header(data)
    w, h, d = meta.dims
    nbytes = w * h * d * meta.np_dtype.itemsize
    payload = data[meta.data_offset : meta.data_offset + nbytes]
    if len(payload) < nbytes:
        raise TruncatedInput(f"payload has {len(payload)} bytes, header declares {nbytes}")
    vol = np.frombuffer(payload, dtype=meta.np_dtype).reshape((w, h, d), order="F")
    return meta, np.ascontiguousarray(vol.astype(vol.dtype.newbyteorder("=")))


def write_volume(path, volume: np.ndarray, voxel_spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a (W, H, D) array as a single-file volume; gzipped for .gz paths.

    Gzip output uses mtime=0 so identical voxels give identical files.
    """
    if volume.ndim != 3:
        raise DimMismatch(f"expected 3-D array, got shape {volume.shape}")
    kind = {np.dtype("u1"): "uint8", np.dtype("i2"): "int16", np.dtype("f4"): "float32"}.get(volume.dtype)
    if kind is None:
        raise UnsupportedDatatype(f"cannot write dtype {volume.dtype}")
    code = _DATATYPE_CODES[kind]
    bits = _DATATYPES[code][2]

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *volume.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, bits)
    struct.pack_into("<8f", header, 76, 1.0, *voxel_spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    header[344:348] = _MAGIC_SINGLE

    body = bytes(header) + b"\x00\x00\x00\x00" + np.asfortranarray(volume).tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(body, mtime=0))
    else:
        path.write_bytes(body)


def slice_volume(volume: np.ndarray, axis: int, meta: VolumeMeta | None = None) -> list[np.ndarray]:
    """Cut a volume into its 2-D planes along one axis.

    Stacking the returned slices along the same axis reconstructs the
    volume exactly (see stack_slices).
    """
    if axis not in (0, 1, 2):
        raise InvalidAxis(f"axis must be 0, 1, or 2, got {axis}")
    if volume.ndim != 3:
        raise DimMismatch(f"expected 3-D array, got shape {volume.shape}")
    if meta is not None and tuple(volume.shape) != tuple(meta.dims):
        raise DimMismatch(f"array shape {volume.shape} != declared dims {meta.dims}")
    return [np.take(volume, i, axis=axis) for i in range(volume.shape[axis])]


def stack_slices(slices: list[np.ndarray], axis: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise InvalidAxis(f"axis must be 0, 1, or 2, got {axis}")
    return np.stack(slices, axis=axis)


def slice_name(volume_id: str, axis: int, index: int, depth: int) -> str:
    """Deterministic slice stem carrying (volume id, axis, index)."""
    width = max(3, len(str(max(depth - 1, 0))))
    return f"{volume_id}_ax{axis}_{index:0{width}d}"


_SLICE_STEM_RE = re.compile(r"^(?P<vol>.+)_ax(?P<axis>[012])_(?P<index>\d+)$")


def parse_slice_stem(stem: str):
    """Recover (volume id, axis, index) from a slice stem, or None."""
    m = _SLICE_STEM_RE.match(stem)
    if m is None:
        return None
    return m.group("vol"), int(m.group("axis")), int(m.group("index"))


def window_to_u8(plane: np.ndarray) -> np.ndarray:
    """Deterministic per-slice min-max window onto 0..255."""
    a = plane.astype(np.float64)
    lo = a.min()
    hi = a.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.clip(np.rint((a - lo) * (255.0 / (hi - lo))), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# Raster codec (PNG)
# --------------------------------------------------------------------------

_INT_MASK_MODES = {"1", "L", "P", "I", "I;16"}


def _open_image(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeFailure(f"{path}: {exc}") from exc


def decode_image_info(path) -> tuple[int, int, str]:
    """Decode a 2-D image, returning (width, height, content hash).

    The hash covers decoded pixel bytes (plus mode and size), not file
    bytes, so the same pixels under different compression dedupe.
    """
    img = _open_image(path)
    digest = hashlib.sha256()
    digest.update(img.mode.encode())
    digest.update(struct.pack("<ii", *img.size))
    digest.update(img.tobytes())
    return img.size[0], img.size[1], digest.hexdigest()


def encode_image_png(pixels: np.ndarray, path) -> None:
    """Write a uint8 grayscale (H, W) or color (H, W, 3) array as PNG."""
    if pixels.dtype != np.uint8:
        raise DecodeFailure(f"image array must be uint8, got {pixels.dtype}")
    mode = "L" if pixels.ndim == 2 else "RGB"
    Image.fromarray(pixels, mode=mode).save(path, format="PNG")


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel integer label image plus its value -> raw-label map.

    ``unknown_values`` lists nonzero pixel values absent from value_map;
    the strict decoder rejects them, the corpus scanner records them so QC
    can classify the sample instead of crashing the run.
    """

    pixels: np.ndarray  # (height, width) integer array
    value_map: dict
    source: str | None = None
    unknown_values: tuple = ()

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def present_values(self) -> list[int]:
        values = np.unique(self.pixels)
        return [int(v) for v in values if v != 0]

    def labels(self) -> list[str]:
        """Raw label strings present in this mask (mapped values only)."""
        return [self.value_map[v] for v in self.present_values() if v in self.value_map]


def decode_mask_pixels(path) -> np.ndarray:
    """Decode a mask file to an integer array; DecodeFailure otherwise."""
    img = _open_image(path)
    if img.mode not in _INT_MASK_MODES:
        raise DecodeFailure(f"{path}: mask must be single-channel integer, got mode {img.mode!r}")
    pixels = np.asarray(img)
    if pixels.dtype == bool:
        pixels = pixels.astype(np.uint8)
    return pixels


def decode_label_mask(path, value_map: dict) -> LabelMask:
    """Strict mask decode: every nonzero pixel value must be in value_map."""
    pixels = decode_mask_pixels(path)
    mask = LabelMask(pixels=pixels, value_map=dict(value_map), source=str(path))
    unknown = [v for v in mask.present_values() if v not in value_map]
    if unknown:
        raise UnknownLabelValue(f"{path}: values {unknown} missing from value_map")
    return mask


def encode_label_mask(mask: LabelMask, path) -> None:
    """Write mask pixels losslessly: 8-bit PNG, or 16-bit when values exceed 255."""
    pixels = mask.pixels
    if pixels.size and pixels.min() < 0:
        raise DecodeFailure("mask has negative label values")
    high = int(pixels.max()) if pixels.size else 0
    if high <= 255:
        Image.fromarray(pixels.astype(np.uint8), mode="L").save(path, format="PNG")
    elif high <= 65535:
        Image.fromarray(pixels.astype(np.uint16)).save(path, format="PNG")
    else:
        raise DecodeFailure(f"mask value {high} exceeds 16-bit PNG range")


# --------------------------------------------------------------------------
# Corpus records and pairing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VolumeProvenance:
    volume_id: str
    axis: int
    index: int


@dataclass(frozen=True)
class ImageRecord:
    """One 2-D image of the corpus."""

    image_id: str  # "<dataset>/<stem>", unique across the corpus
    file_name: str  # path relative to the corpus root, posix separators
    source_dataset: str
    modality: str
    width: int
    height: int
    provenance: VolumeProvenance | None = None


@dataclass(frozen=True)
class PairedSample:
    image: ImageRecord
    masks: tuple  # LabelMask entries, >= 1
    source_dataset: str
    content_hash: str


@dataclass(frozen=True)
class ScanDefect:
    """A candidate that failed before annotation checks.

    kind is one of: unreadable-image, no-mask, masks-unreadable,
    mask-dim-mismatch.
    """

    dataset: str
    image_path: str
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class DuplicateRecord:
    kept: str
    dropped: str
    content_hash: str


@dataclass
class CorpusScan:
    samples: list = field(default_factory=list)
    defects: list = field(default_factory=list)
    duplicates: list = field(default_factory=list)

    @property
    def total_candidates(self) -> int:
        """Distinct candidates entering QC (duplicates already folded away)."""
        return len(self.samples) + len(self.defects)


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def _stem_mask_candidates(masks_dir: Path, stem: str) -> list[Path]:
    """Mask files pairing with an image stem under filename-stem layout.

    Two layouts are recognized: flat files ``<stem>.png`` / ``<stem>__*.png``
    and a nested directory ``<stem>/*.png``. An image whose stem matches
    both layouts is ambiguous and aborts the scan.
    """
    flat: list[Path] = []
    direct = masks_dir / f"{stem}.png"
    if direct.is_file():
        flat.append(direct)
    if masks_dir.is_dir():
        flat.extend(sorted(p for p in masks_dir.glob(f"{stem}__*.png") if p.is_file()))
    nested_dir = masks_dir / stem
    nested = sorted(p for p in nested_dir.glob("*.png") if p.is_file()) if nested_dir.is_dir() else []
    if flat and nested:
        raise AmbiguousPairing(f"image stem {stem!r} matches both flat files and directory {nested_dir}")
    return flat or nested


def _image_provenance(stem: str) -> VolumeProvenance | None:
    parsed = parse_slice_stem(stem)
    if parsed is None:
        return None
    return VolumeProvenance(*parsed)


def _scan_one(dataset: DatasetSpec, root: Path, image_path: Path, mask_paths: list[Path]):
    """Decode one candidate; pure, safe to run from any worker."""
    rel_image = _rel(image_path, root)
    try:
        width, height, content_hash = decode_image_info(image_path)
    except DecodeFailure as exc:
        return ScanDefect(dataset.name, rel_image, "unreadable-image", str(exc)), None

    if not mask_paths:
        return ScanDefect(dataset.name, rel_image, "no-mask", "no mask file pairs with this image"), content_hash

    masks = []
    drop_reasons = []
    for mask_path in mask_paths:
        rel_mask = _rel(mask_path, root)
        try:
            pixels = decode_mask_pixels(mask_path)
        except DecodeFailure as exc:
            drop_reasons.append(("masks-unreadable", f"{rel_mask}: {exc}"))
            continue
        if (pixels.shape[1], pixels.shape[0]) != (width, height):
            drop_reasons.append(
                (
                    "mask-dim-mismatch",
                    f"{rel_mask} is {pixels.shape[1]}x{pixels.shape[0]}, image is {width}x{height}",
                )
            )
            continue
        unknown = tuple(
            int(v) for v in np.unique(pixels) if v != 0 and int(v) not in dataset.value_map
        )
        masks.append(
            LabelMask(pixels=pixels, value_map=dataset.value_map, source=rel_mask, unknown_values=unknown)
        )

    if not masks:
        kind, detail = drop_reasons[0]
        return ScanDefect(dataset.name, rel_image, kind, detail), content_hash

    stem = image_path.stem
    record = ImageRecord(
        image_id=f"{dataset.name}/{stem}",
        file_name=rel_image,
        source_dataset=dataset.name,
        modality=dataset.modality,
        width=width,
        height=height,
        provenance=_image_provenance(stem),
    )
    sample = PairedSample(
        image=record, masks=tuple(masks), source_dataset=dataset.name, content_hash=content_hash
    )
    return sample, content_hash


def pair_corpus(manifest: Manifest, workers: int = 1) -> CorpusScan:
    """Scan every dataset into paired samples plus orphan/duplicate reports.

    Deterministic: images are visited in sorted (dataset, path) order and
    byte-identical pixel content keeps only its first occurrence, so two
    scans of the same tree produce identical results at any worker count.
    """
    jobs = []  # (dataset, image_path, mask_paths)
    for ds in manifest.datasets:
        images_dir = manifest.root / ds.images_dir
        images = _list_images(images_dir)
        if not images:
            raise EmptyCorpus(f"dataset {ds.name!r} has no images under {images_dir}")
        if ds.pairing == "manifest-listed":
            listed = {image: masks for image, masks in ds.pairs}
            for image_path in images:
                rel = _rel(image_path, manifest.root)
                masks = [manifest.root / m for m in listed.get(rel, ())]
                jobs.append((ds, image_path, [m for m in masks if m.is_file()]))
        else:
            masks_dir = manifest.root / ds.masks_dir
            for image_path in images:
                jobs.append((ds, image_path, _stem_mask_candidates(masks_dir, image_path.stem)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _scan_one(j[0], manifest.root, j[1], j[2]), jobs))
    else:
        results = [_scan_one(ds, manifest.root, img, masks) for ds, img, masks in jobs]

    scan = CorpusScan()
    seen_hashes: dict[str, str] = {}
    for (ds, image_path, _), (outcome, content_hash) in zip(jobs, results):
        rel_image = _rel(image_path, manifest.root)
        if content_hash is not None and content_hash in seen_hashes:
            scan.duplicates.append(
                DuplicateRecord(kept=seen_hashes[content_hash], dropped=rel_image, content_hash=content_hash)
            )
            continue
        if content_hash is not None:
            seen_hashes[content_hash] = rel_image
        if isinstance(outcome, ScanDefect):
            scan.defects.append(outcome)
        else:
            scan.samples.append(outcome)
    return scan


# --------------------------------------------------------------------------
# Ingest: materialize a standardized raster tree from a source manifest
# --------------------------------------------------------------------------


@dataclass
class IngestReport:
    volumes_sliced: dict = field(default_factory=dict)  # dataset -> count
    images_written: dict = field(default_factory=dict)
    masks_written: dict = field(default_factory=dict)

    def as_records(self) -> list[dict]:
        names = sorted(set(self.volumes_sliced) | set(self.images_written) | set(self.masks_written))
        return [
            {
                "dataset": name,
                "volumes_sliced": self.volumes_sliced.get(name, 0),
                "images_written": self.images_written.get(name, 0),
                "masks_written": self.masks_written.get(name, 0),
            }
            for name in names
        ]


def _list_volumes(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    out = [p for p in directory.iterdir() if p.is_file() and (p.suffix == ".nii" or p.name.endswith(".nii.gz"))]
    return sorted(out)


def _volume_id(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _write_volume_slices(volume: np.ndarray, axes, out_dir: Path, volume_id: str, as_mask: bool) -> int:
    """Emit one PNG per plane; planes are transposed so the first remaining
    volume axis becomes the PNG width."""
    written = 0
    for axis in axes:
        planes = slice_volume(volume, axis)
        for index, plane in enumerate(planes):
            stem = slice_name(volume_id, axis, index, len(planes))
            png = plane.T
            if as_mask:
                encode_label_mask(LabelMask(pixels=png, value_map={}), out_dir / f"{stem}.png")
            else:
                encode_image_png(window_to_u8(png), out_dir / f"{stem}.png")
            written += 1
    return written


def _ingest_volume_pair(ds: DatasetSpec, root: Path, vol_path: Path, axes, images_out: Path, masks_out: Path):
    """Slice one image volume (and its mask volume, if present) to PNGs."""
    _, volume = load_volume(vol_path)
    vid = _volume_id(vol_path)
    n_img = _write_volume_slices(volume, axes, images_out, vid, as_mask=False)
    n_mask = 0
    if ds.mask_volumes_dir:
        mask_path = root / ds.mask_volumes_dir / vol_path.name
        if mask_path.is_file():
            _, mask_volume = load_volume(mask_path)
            if mask_volume.shape != volume.shape:
                raise DimMismatch(
                    f"mask volume {mask_path.name} is {mask_volume.shape}, image volume is {volume.shape}"
                )
            if not np.issubdtype(mask_volume.dtype, np.integer):
                raise DecodeFailure(f"mask volume {mask_path.name} must be integer-typed")
            n_mask = _write_volume_slices(mask_volume, axes, masks_out, vid, as_mask=True)
    return 1, n_img, n_mask


def _ingest_image(image_path: Path, images_out: Path):
    img = _open_image(image_path)
    if img.mode in ("L", "RGB"):
        img.save(images_out / image_path.name, format="PNG")
    elif img.mode in ("RGBA", "P", "1", "I", "I;16"):
        img.convert("RGB" if img.mode == "RGBA" else "L").save(images_out / image_path.name, format="PNG")
    else:
        raise DecodeFailure(f"{image_path}: unsupported image mode {img.mode!r}")
    return 0, 1, 0


def _ingest_mask(mask_path: Path, masks_root: Path, masks_out: Path):
    pixels = decode_mask_pixels(mask_path)
    target = masks_out / mask_path.relative_to(masks_root)
    target.parent.mkdir(parents=True, exist_ok=True)
    encode_label_mask(LabelMask(pixels=pixels, value_map={}), target)
    return 0, 0, 1


def run_ingest(manifest: Manifest, out_dir, axes_override=None, workers: int = 1) -> tuple[Manifest, IngestReport]:
    """Build the standardized tree: sliced volumes plus re-encoded 2-D pairs.

    Returns the derived manifest (written to <out>/manifest.toml by the CLI)
    describing the standardized tree with filename-stem pairing. Every task
    writes its own output files, so running with several workers yields the
    same tree as one.
    """
    out_root = Path(out_dir)
    report = IngestReport()
    derived = []
    for ds in manifest.datasets:
        images_out = out_root / ds.name / "images"
        masks_out = out_root / ds.name / "masks"
        images_out.mkdir(parents=True, exist_ok=True)
        masks_out.mkdir(parents=True, exist_ok=True)
        axes = tuple(axes_override) if axes_override else ds.axes

        tasks = []
        if ds.volumes_dir:
            for vol_path in _list_volumes(manifest.root / ds.volumes_dir):
                tasks.append(
                    lambda vp=vol_path: _ingest_volume_pair(ds, manifest.root, vp, axes, images_out, masks_out)
                )
        for image_path in _list_images(manifest.root / ds.images_dir) if ds.images_dir else []:
            tasks.append(lambda ip=image_path: _ingest_image(ip, images_out))
        if ds.masks_dir:
            masks_root = manifest.root / ds.masks_dir
            if masks_root.is_dir():
                for mask_path in sorted(masks_root.rglob("*.png")):
                    tasks.append(lambda mp=mask_path: _ingest_mask(mp, masks_root, masks_out))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                counts = list(pool.map(lambda t: t(), tasks))
        else:
            counts = [t() for t in tasks]
        report.volumes_sliced[ds.name] = sum(c[0] for c in counts)
        report.images_written[ds.name] = sum(c[1] for c in counts)
        report.masks_written[ds.name] = sum(c[2] for c in counts)
        derived.append(
            DatasetSpec(
                name=ds.name,
                modality=ds.modality,
                pairing="filename-stem",
                images_dir=f"{ds.name}/images",
                masks_dir=f"{ds.name}/masks",
                value_map=ds.value_map,
            )
        )
    return Manifest(root=out_root, datasets=tuple(derived)), report
