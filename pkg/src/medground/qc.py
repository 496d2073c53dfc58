"""Three-tier sample gating.

Tier 1 drops candidates whose image file does not decode. Tier 2 drops
candidates left without a usable segmentation mask (none paired, none
readable, or none matching the image dimensions). Tier 3 drops samples
whose annotations are invalid: a label that harmonizes to nothing, or
every region falling below the minimum area fraction. Tiers run in fixed
1 -> 2 -> 3 order and a rejected sample records only its earliest failing
tier. QC classifies; it never mutates inputs and never raises on bad
samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ZeroAreaImage
from .geometry import BBox, bbox_of, connected_components, merge_components, rle_encode
from .ingest import CorpusScan, PairedSample
from .taxonomy import UNMAPPED, LabelTaxonomy, harmonize_label

DEFAULT_MIN_AREA_FRACTION = 0.015

_TIER_BY_DEFECT = {
    "unreadable-image": 1,
    "no-mask": 2,
    "masks-unreadable": 2,
    "mask-dim-mismatch": 2,
}

TIER_NAMES = {1: "unreadable", 2: "unpaired", 3: "invalid annotations"}


@dataclass(frozen=True)
class RegionAnnotation:
    """One grounded region: harmonized label, tight box, mask pixel count.

    ``rle`` optionally holds the column-major run-length counts of the
    backing pixel set (populated when the pipeline runs with mask embedding
    enabled; the run starts with the zero-pixel count).
    """

    label: str
    bbox: BBox
    pixel_count: int
    source_mask: str  # "<mask path>#<value>:<component index>"
    label_value: int
    rle: tuple | None = None

    def area_fraction(self, width: int, height: int) -> Fraction:
        if width * height == 0:
            raise ZeroAreaImage("image has zero pixels")
        return Fraction(self.pixel_count, width * height)


@dataclass(frozen=True)
class AcceptedSample:
    sample: PairedSample
    annotations: tuple  # RegionAnnotation entries that survived filtering


@dataclass(frozen=True)
class Rejection:
    sample_id: str  # image path relative to corpus root
    tier: int
    reason: str


@dataclass
class QCReport:
    total: int = 0
    tier1_rejected: int = 0
    tier2_rejected: int = 0
    tier3_rejected: int = 0
    accepted: int = 0
    rejections: list = field(default_factory=list)
    duplicates: int = 0
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION

    def tier_counts(self) -> dict:
        return {1: self.tier1_rejected, 2: self.tier2_rejected, 3: self.tier3_rejected}

    def as_records(self) -> dict:
        return {
            "total": self.total,
            "tier1_rejected": self.tier1_rejected,
            "tier2_rejected": self.tier2_rejected,
            "tier3_rejected": self.tier3_rejected,
            "accepted": self.accepted,
            "duplicates": self.duplicates,
            "min_area_fraction": self.min_area_fraction,
            "rejections": [
                {"sample": r.sample_id, "tier": r.tier, "reason": r.reason} for r in self.rejections
            ],
        }

    def to_text(self) -> str:
        lines = [
            "qc report",
            f"total candidates: {self.total}",
            f"duplicates removed: {self.duplicates}",
            f"min area fraction: {self.min_area_fraction}",
            f"tier 1 rejected ({TIER_NAMES[1]}): {self.tier1_rejected}",
            f"tier 2 rejected ({TIER_NAMES[2]}): {self.tier2_rejected}",
            f"tier 3 rejected ({TIER_NAMES[3]}): {self.tier3_rejected}",
            f"accepted: {self.accepted}",
        ]
        if self.rejections:
            lines.append("")
            lines.append("rejections:")
            for r in self.rejections:
                lines.append(f"  tier {r.tier}  {r.sample_id}  {r.reason}")
        lines.append("")
        return "\n".join(lines)


def filter_min_area(annotations, image_dims, min_area_fraction: float):
    """Keep annotations whose mask covers at least the given image fraction.

    The comparison is exact (rational arithmetic against the binary value of
    the float threshold), so a mask at exactly the threshold is retained.
    """
    width, height = image_dims
    if width * height == 0:
        raise ZeroAreaImage(f"image dims {width}x{height}")
    threshold = Fraction(min_area_fraction)
    return [a for a in annotations if Fraction(a.pixel_count, width * height) >= threshold]


def build_annotations(
    sample: PairedSample,
    taxonomy: LabelTaxonomy | None = None,
    connectivity: int = 8,
    bbox_mode: str = "per-component",
    keep_rle: bool = False,
):
    """Derive RegionAnnotation entries for a sample.

    Returns (annotations, undefined_labels) where undefined_labels collects
    every label problem found: mask values missing from the value map and
    raw strings the taxonomy cannot harmonize. With no taxonomy, raw labels
    are kept as-is and only value-map coverage is checked.
    """
    if bbox_mode not in ("per-component", "per-mask"):
        raise ValueError(f"bbox_mode must be per-component or per-mask, got {bbox_mode!r}")
    annotations = []
    undefined = []
    for mask in sample.masks:
        for value in mask.unknown_values:
            undefined.append(f"{mask.source}: value {value} not in value_map")
        components = connected_components(mask.pixels, connectivity=connectivity)
        by_value: dict[int, list] = {}
        for comp in components:
            by_value.setdefault(comp.label_value, []).append(comp)
        for value in sorted(by_value):
            if value in mask.unknown_values:
                continue
            raw = mask.value_map[value]
            if taxonomy is None:
                label = raw
            else:
                label = harmonize_label(raw, taxonomy)
                if label is UNMAPPED:
                    undefined.append(f"{mask.source}: label {raw!r} is not in the taxonomy")
                    continue
            comps = by_value[value]
            if bbox_mode == "per-mask":
                comps = [merge_components(comps)]
            for index, comp in enumerate(comps):
                rle = None
                if keep_rle:
                    rle = tuple(rle_encode(comp.rows, comp.cols, mask.height, mask.width))
                annotations.append(
                    RegionAnnotation(
                        label=label,
                        bbox=bbox_of(comp),
                        pixel_count=comp.pixel_count,
                        source_mask=f"{mask.source}#{value}:{index}",
                        label_value=value,
                        rle=rle,
                    )
                )
    return annotations, undefined


def run_qc(
    scan,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
    taxonomy: LabelTaxonomy | None = None,
    connectivity: int = 8,
    bbox_mode: str = "per-component",
    keep_rle: bool = False,
):
    """Gate a scanned corpus; returns (accepted samples, QCReport).

    Accepts either a CorpusScan or a bare list of PairedSample (treated as a
    scan with no tier-1/2 defects). Conservation holds by construction:
    accepted + tier rejections == total candidates.
    """
    if not isinstance(scan, CorpusScan):
        scan = CorpusScan(samples=list(scan))
    if not 0 <= min_area_fraction < 1:
        raise ValueError(f"min_area_fraction must be in [0, 1), got {min_area_fraction}")

    report = QCReport(min_area_fraction=min_area_fraction, duplicates=len(scan.duplicates))
    report.total = scan.total_candidates
    accepted: list[AcceptedSample] = []

    for defect in scan.defects:
        tier = _TIER_BY_DEFECT[defect.kind]
        if tier == 1:
            report.tier1_rejected += 1
        else:
            report.tier2_rejected += 1
        detail = f"{defect.kind}: {defect.detail}" if defect.detail else defect.kind
        report.rejections.append(Rejection(defect.image_path, tier, detail))

    for sample in scan.samples:
        annotations, undefined = build_annotations(
            sample, taxonomy=taxonomy, connectivity=connectivity, bbox_mode=bbox_mode, keep_rle=keep_rle
        )
        if undefined:
            report.tier3_rejected += 1
            report.rejections.append(
                Rejection(sample.image.file_name, 3, f"undefined label semantics: {undefined[0]}")
            )
            continue
        kept = filter_min_area(
            annotations, (sample.image.width, sample.image.height), min_area_fraction
        )
        if not kept:
            report.tier3_rejected += 1
            detail = "mask empty" if not annotations else f"all {len(annotations)} regions below minimum area"
            report.rejections.append(Rejection(sample.image.file_name, 3, detail))
            continue
        accepted.append(AcceptedSample(sample=sample, annotations=tuple(kept)))

    report.accepted = len(accepted)
    report.rejections.sort(key=lambda r: (r.tier, r.sample_id))
    return accepted, report
