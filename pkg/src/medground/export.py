"""COCO-style document export, re-import, and corpus statistics.

The annotation document is JSON with four top-level keys written in a fixed
order and a fixed field order inside every record (see README for the
bit-exact layout). All geometry is integral: bbox is [x, y, w, h] pixels,
``area`` is the mask pixel count (not the box area), and the optional
``segmentation`` holds column-major run-length counts. Ids are assigned
deterministically: images by sorted (dataset, file name), categories by
sorted canonical name, annotations in image-id order. Exports are therefore
byte-identical across reruns and worker counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

from .errors import BoundsViolation, DocumentError, UnharmonizedLabel, WriteFailure
from .geometry import BBox
from .ingest import ImageRecord, VolumeProvenance, parse_slice_stem
from .qc import AcceptedSample, RegionAnnotation
from .taxonomy import LabelTaxonomy, taxonomy_rollup

FORMAT_VERSION = "1"

_INFO = {
    "description": "medground unified grounding dataset",
    "format_version": FORMAT_VERSION,
}


@dataclass(frozen=True)
class CorpusRecord:
    """One image plus its retained annotations; the unit of export."""

    image: ImageRecord
    annotations: tuple  # RegionAnnotation entries


@dataclass(frozen=True)
class CocoDocument:
    images: tuple
    annotations: tuple
    categories: tuple

    def to_json(self) -> str:
        return json.dumps(
            {
                "info": _INFO,
                "images": list(self.images),
                "annotations": list(self.annotations),
                "categories": list(self.categories),
            },
            indent=2,
        )


def _as_records(corpus) -> list[CorpusRecord]:
    records = []
    for item in corpus:
        if isinstance(item, AcceptedSample):
            records.append(CorpusRecord(image=item.sample.image, annotations=item.annotations))
        elif isinstance(item, CorpusRecord):
            records.append(item)
        else:
            raise TypeError(f"cannot export {type(item).__name__}")
    return records


def build_coco(corpus, tax: LabelTaxonomy, include_rle: bool = False) -> CocoDocument:
    """Assemble the annotation document from accepted samples or records.

    Every label must already be a canonical fine label of the taxonomy and
    every box must sit inside its image; violations abort the export.
    """
    records = sorted(_as_records(corpus), key=lambda r: (r.image.source_dataset, r.image.file_name))

    image_rows = []
    annotation_rows = []
    used_labels = set()
    for record in records:
        for ann in record.annotations:
            if ann.label not in tax.fine_to_category:
                raise UnharmonizedLabel(
                    f"{record.image.file_name}: {ann.label!r} is not a canonical fine label"
                )
            used_labels.add(ann.label)

    category_ids = {name: i + 1 for i, name in enumerate(sorted(used_labels))}
    categories = tuple(
        {"id": category_ids[name], "name": name, "supercategory": tax.category_of(name)}
        for name in sorted(used_labels)
    )

    next_annotation = 1
    for image_id, record in enumerate(records, start=1):
        img = record.image
        image_rows.append(
            {
                "id": image_id,
                "file_name": img.file_name,
                "width": img.width,
                "height": img.height,
                "modality": img.modality,
                "source_dataset": img.source_dataset,
            }
        )
        for ann in record.annotations:
            if not ann.bbox.within(img.width, img.height):
                raise BoundsViolation(
                    f"annotation {ann.source_mask} box {ann.bbox.as_list()} "
                    f"exceeds image {img.file_name} ({img.width}x{img.height})"
                )
            row = {
                "id": next_annotation,
                "image_id": image_id,
                "category_id": category_ids[ann.label],
                "bbox": [int(v) for v in ann.bbox.as_list()],
                "area": int(ann.pixel_count),
                "source_mask": ann.source_mask,
            }
            if include_rle:
                if ann.rle is None:
                    raise ValueError(
                        f"annotation {ann.source_mask} has no run-length data; "
                        "run QC with mask embedding enabled"
                    )
                row["segmentation"] = {"size": [img.height, img.width], "counts": list(ann.rle)}
            next_annotation += 1
            annotation_rows.append(row)

    return CocoDocument(
        images=tuple(image_rows), annotations=tuple(annotation_rows), categories=tuple(categories)
    )


def export_coco(corpus, tax: LabelTaxonomy, path, include_rle: bool = False) -> CocoDocument:
    doc = build_coco(corpus, tax, include_rle=include_rle)
    try:
        Path(path).write_text(doc.to_json() + "\n", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc
    return doc


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DocumentError(message)


def load_coco(path) -> CocoDocument:
    """Read and validate an annotation document."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path} is not valid JSON: {exc}") from exc

    for key in ("images", "annotations", "categories"):
        _require(isinstance(raw.get(key), list), f"document lacks a {key!r} list")

    images = {}
    for row in raw["images"]:
        _require(
            all(k in row for k in ("id", "file_name", "width", "height", "modality", "source_dataset")),
            f"image row missing fields: {row}",
        )
        _require(row["id"] not in images, f"duplicate image id {row['id']}")
        images[row["id"]] = row
    category_ids = set()
    for row in raw["categories"]:
        _require(all(k in row for k in ("id", "name", "supercategory")), f"category row missing fields: {row}")
        _require(row["id"] not in category_ids, f"duplicate category id {row['id']}")
        category_ids.add(row["id"])
    annotation_ids = set()
    for row in raw["annotations"]:
        _require(
            all(k in row for k in ("id", "image_id", "category_id", "bbox", "area")),
            f"annotation row missing fields: {row}",
        )
        _require(row["id"] not in annotation_ids, f"duplicate annotation id {row['id']}")
        annotation_ids.add(row["id"])
        _require(row["image_id"] in images, f"annotation {row['id']} references unknown image {row['image_id']}")
        _require(
            row["category_id"] in category_ids,
            f"annotation {row['id']} references unknown category {row['category_id']}",
        )
        x, y, w, h = row["bbox"]
        img = images[row["image_id"]]
        _require(
            w > 0 and h > 0 and x >= 0 and y >= 0 and x + w <= img["width"] and y + h <= img["height"],
            f"annotation {row['id']} box {row['bbox']} exceeds image bounds",
        )
    return CocoDocument(
        images=tuple(raw["images"]),
        annotations=tuple(raw["annotations"]),
        categories=tuple(raw["categories"]),
    )


def corpus_from_coco(doc: CocoDocument) -> list[CorpusRecord]:
    """Rebuild corpus records from a document; inverse of build_coco."""
    names = {row["id"]: row["name"] for row in doc.categories}
    by_image: dict[int, list[RegionAnnotation]] = {}
    for row in sorted(doc.annotations, key=lambda r: r["id"]):
        x, y, w, h = row["bbox"]
        source_mask = row.get("source_mask", "")
        tail = source_mask.rsplit("#", 1)[-1]
        label_value = int(tail.split(":", 1)[0]) if ":" in tail and tail.split(":", 1)[0].isdigit() else 0
        segmentation = row.get("segmentation")
        rle = tuple(segmentation["counts"]) if segmentation else None
        by_image.setdefault(row["image_id"], []).append(
            RegionAnnotation(
                label=names[row["category_id"]],
                bbox=BBox(x=x, y=y, w=w, h=h),
                pixel_count=int(row["area"]),
                source_mask=source_mask,
                label_value=label_value,
                rle=rle,
            )
        )
    records = []
    for row in sorted(doc.images, key=lambda r: r["id"]):
        stem = Path(row["file_name"]).stem
        parsed = parse_slice_stem(stem)
        provenance = VolumeProvenance(*parsed) if parsed else None
        image = ImageRecord(
            image_id=f"{row['source_dataset']}/{stem}",
            file_name=row["file_name"],
            source_dataset=row["source_dataset"],
            modality=row["modality"],
            width=row["width"],
            height=row["height"],
            provenance=provenance,
        )
        records.append(CorpusRecord(image=image, annotations=tuple(by_image.get(row["id"], ()))))
    return records


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def _percent(count: int, total: int) -> Decimal:
    return (Decimal(count) * 100 / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


@dataclass
class StatsReport:
    total_images: int = 0
    total_annotations: int = 0
    modality_counts: dict = field(default_factory=dict)
    modality_share: dict = field(default_factory=dict)  # modality -> Decimal percent
    region_counts: dict = field(default_factory=dict)
    category_counts: dict = field(default_factory=dict)
    masks_per_image: Fraction | None = None

    def masks_per_image_text(self) -> str:
        if self.masks_per_image is None:
            return "n/a"
        mean = Decimal(self.masks_per_image.numerator) / Decimal(self.masks_per_image.denominator)
        return str(mean.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))

    def as_records(self) -> dict:
        return {
            "total_images": self.total_images,
            "total_annotations": self.total_annotations,
            "modality_counts": dict(sorted(self.modality_counts.items())),
            "modality_share": {k: str(v) for k, v in sorted(self.modality_share.items())},
            "region_counts": dict(sorted(self.region_counts.items())),
            "category_counts": dict(sorted(self.category_counts.items())),
            "masks_per_image": self.masks_per_image_text(),
            "masks_per_image_exact": (
                [self.masks_per_image.numerator, self.masks_per_image.denominator]
                if self.masks_per_image is not None
                else None
            ),
        }

    def to_text(self) -> str:
        lines = [
            "corpus statistics",
            f"images: {self.total_images}",
            f"annotations: {self.total_annotations}",
            f"masks/image mean: {self.masks_per_image_text()}",
            "",
            "modality        images    share",
        ]
        for modality in sorted(self.modality_counts):
            share = self.modality_share[modality]
            lines.append(f"{modality:<14}  {self.modality_counts[modality]:>6}  {share:>6}%")
        lines.append("")
        lines.append("region          annotations")
        for region in sorted(self.region_counts):
            lines.append(f"{region:<14}  {self.region_counts[region]:>10}")
        lines.append("")
        return "\n".join(lines)


def compute_stats(corpus, tax: LabelTaxonomy) -> StatsReport:
    """Exact integer counting over a corpus (accepted samples or records).

    Percentages are rounded half-up to two decimals; the masks-per-image
    mean is kept as an exact ratio.
    """
    records = _as_records(corpus)
    report = StatsReport()
    fine_counts: dict[str, int] = {}
    for record in records:
        report.total_images += 1
        modality = record.image.modality
        report.modality_counts[modality] = report.modality_counts.get(modality, 0) + 1
        for ann in record.annotations:
            report.total_annotations += 1
            fine_counts[ann.label] = fine_counts.get(ann.label, 0) + 1
    if report.total_images:
        report.masks_per_image = Fraction(report.total_annotations, report.total_images)
        report.modality_share = {
            modality: _percent(count, report.total_images)
            for modality, count in report.modality_counts.items()
        }
    report.category_counts, report.region_counts = taxonomy_rollup(fine_counts, tax)
    return report
