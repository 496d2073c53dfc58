"""Label harmonization and the three-level taxonomy.

Raw annotation strings from heterogeneous sources are normalized, resolved
through a synonym table to a canonical fine label, then rolled up to an
anatomical category and a body region. The taxonomy is data, not code: it
ships as an editable text file (see ``data/taxonomy.txt``) with three
sections and a version header:

    medground-taxonomy v1

    [synonyms]
    left hip joint -> hip joint

    [fine-to-category]
    hip joint -> pelvis(hip)

    [category-to-region]
    pelvis(hip) -> pelvis

Keys are stored normalized (lowercase, trimmed, underscores/hyphens as
spaces, single internal spaces). Canonical serialization emits the sections
in the order above with entries sorted by key, so loading a canonical file
and re-serializing it is byte-identical.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

from .errors import TaxonomyError, UnknownFineLabel

HEADER = "medground-taxonomy v1"
_SECTIONS = ("synonyms", "fine-to-category", "category-to-region")
_ENTRY_RE = re.compile(r"^(?P<key>.+?)\s*->\s*(?P<value>.+?)$")


class _UnmappedType:
    """Singleton returned when a raw label resolves to nothing."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Unmapped"

    def __bool__(self):
        return False


UNMAPPED = _UnmappedType()


def normalize_label(raw: str) -> str:
    """Normalize a raw label string for lookup.

    Lowercase, strip, turn underscores and hyphens into spaces, and collapse
    runs of whitespace; deterministic and simple enough to audit by eye.
    """
    s = raw.lower().strip()
    s = s.replace("_", " ").replace("-", " ")
    return re.sub(r"\s+", " ", s)


@dataclass(frozen=True)
class LabelTaxonomy:
    """Immutable three-level label mapping.

    All keys and values are normalized strings. Invariants (checked at
    construction): synonym targets are fine labels, every fine label has a
    category, every category has exactly one region, and no synonym shadows
    a canonical fine label.
    """

    synonyms: dict = field(default_factory=dict)
    fine_to_category: dict = field(default_factory=dict)
    category_to_region: dict = field(default_factory=dict)

    def __post_init__(self):
        for fine, cat in self.fine_to_category.items():
            if cat not in self.category_to_region:
                raise TaxonomyError(f"fine label {fine!r} maps to unknown category {cat!r}")
        for raw, fine in self.synonyms.items():
            if fine not in self.fine_to_category:
                raise TaxonomyError(f"synonym {raw!r} maps to unknown fine label {fine!r}")
            if raw in self.fine_to_category and fine != raw:
                raise TaxonomyError(f"synonym {raw!r} shadows a canonical fine label")

    @property
    def fine_labels(self) -> list[str]:
        return sorted(self.fine_to_category)

    @property
    def categories(self) -> list[str]:
        return sorted(self.category_to_region)

    @property
    def regions(self) -> list[str]:
        return sorted(set(self.category_to_region.values()))

    def category_of(self, fine: str) -> str:
        try:
            return self.fine_to_category[fine]
        except KeyError:
            raise UnknownFineLabel(f"not a fine label: {fine!r}") from None

    def region_of(self, category: str) -> str:
        try:
            return self.category_to_region[category]
        except KeyError:
            raise TaxonomyError(f"not a category: {category!r}") from None


def harmonize_label(raw: str, tax: LabelTaxonomy):
    """Resolve a raw label to its canonical fine label.

    Returns UNMAPPED when the normalized string is neither a synonym nor a
    fine label; callers route that to QC rather than passing raw strings
    through silently. Already-canonical labels map to themselves.
    """
    key = normalize_label(raw)
    if key in tax.synonyms:
        return tax.synonyms[key]
    if key in tax.fine_to_category:
        return key
    return UNMAPPED


def taxonomy_rollup(fine_counts: dict, tax: LabelTaxonomy) -> tuple[dict, dict]:
    """Aggregate per-fine-label counts to categories and regions.

    Count totals are conserved at each level: sum(category counts) equals
    sum(fine counts) and likewise for regions.
    """
    category_counts: dict = {}
    region_counts: dict = {}
    for fine, count in fine_counts.items():
        category = tax.category_of(fine)
        category_counts[category] = category_counts.get(category, 0) + count
        region = tax.category_to_region[category]
        region_counts[region] = region_counts.get(region, 0) + count
    return category_counts, region_counts


def parse_taxonomy(text: str) -> LabelTaxonomy:
    """Parse the three-section taxonomy format; raises TaxonomyError on defects."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise TaxonomyError(f"missing header line {HEADER!r}")
    tables: dict[str, dict] = {name: {} for name in _SECTIONS}
    current: str | None = None
    for number, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1]
            if name not in tables:
                raise TaxonomyError(f"line {number}: unknown section [{name}]")
            current = name
            continue
        if current is None:
            raise TaxonomyError(f"line {number}: entry before any section header")
        m = _ENTRY_RE.match(stripped)
        if m is None:
            raise TaxonomyError(f"line {number}: expected 'key -> value', got {stripped!r}")
        key = normalize_label(m.group("key"))
        value = normalize_label(m.group("value"))
        table = tables[current]
        if key in table and table[key] != value:
            raise TaxonomyError(
                f"line {number}: {key!r} already maps to {table[key]!r}, cannot also map to {value!r}"
            )
        table[key] = value
    return LabelTaxonomy(
        synonyms=tables["synonyms"],
        fine_to_category=tables["fine-to-category"],
        category_to_region=tables["category-to-region"],
    )


def serialize_taxonomy(tax: LabelTaxonomy) -> str:
    """Canonical text form: fixed section order, entries sorted by key."""
    parts = [HEADER, ""]
    for name, table in (
        ("synonyms", tax.synonyms),
        ("fine-to-category", tax.fine_to_category),
        ("category-to-region", tax.category_to_region),
    ):
        parts.append(f"[{name}]")
        for key in sorted(table):
            parts.append(f"{key} -> {table[key]}")
        parts.append("")
    return "\n".join(parts)


def load_taxonomy(path) -> LabelTaxonomy:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def save_taxonomy(tax: LabelTaxonomy, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_taxonomy(tax))


def bundled_taxonomy_text() -> str:
    """Text of the starter taxonomy shipped with the package."""
    return resources.files("medground.data").joinpath("taxonomy.txt").read_text(encoding="utf-8")


def bundled_taxonomy() -> LabelTaxonomy:
    """Starter taxonomy covering common anatomy; see README for scope notes."""
    return parse_taxonomy(bundled_taxonomy_text())
