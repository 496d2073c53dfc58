"""Exception types shared across the pipeline.

Every error raised by medground derives from MedgroundError so callers can
catch the whole family. Validation problems (bad inputs, bad documents) and
I/O problems are kept distinct because the CLI maps them to different exit
codes.
"""


class MedgroundError(Exception):
    """Base class for all medground errors."""


# --- volume parsing ---------------------------------------------------------

class MalformedHeader(MedgroundError):
    """Volume header fails a structural check (size constant, dims, magic)."""


class UnsupportedDatatype(MedgroundError):
    """Volume datatype is outside the supported {u8, i16, f32} subset."""


class TruncatedInput(MedgroundError):
    """Input ends before the declared header or payload does."""


class InvalidAxis(MedgroundError):
    """Slicing axis outside {0, 1, 2}."""


class DimMismatch(MedgroundError):
    """Array shapes disagree with each other or with declared metadata."""


# --- raster / mask decoding -------------------------------------------------

class DecodeFailure(MedgroundError):
    """Raster file could not be decoded."""


class UnknownLabelValue(MedgroundError):
    """Mask contains a nonzero pixel value absent from the value map."""


# --- corpus pairing ---------------------------------------------------------

class EmptyCorpus(MedgroundError):
    """No images found for a dataset."""


class AmbiguousPairing(MedgroundError):
    """One image stem matches masks in two conflicting layouts."""


class ManifestError(MedgroundError):
    """Corpus manifest is missing or structurally invalid."""


# --- geometry ---------------------------------------------------------------

class EmptyComponent(MedgroundError):
    """Bounding box requested for a component with no pixels."""


class ZeroAreaImage(MedgroundError):
    """Area fraction requested against an image with zero pixels."""


# --- taxonomy ---------------------------------------------------------------

class TaxonomyError(MedgroundError):
    """Taxonomy file violates its invariants."""


class UnknownFineLabel(MedgroundError):
    """Rollup requested for a fine label the taxonomy does not define."""


# --- export -----------------------------------------------------------------

class UnharmonizedLabel(MedgroundError):
    """Export received an annotation whose label is not a canonical fine label."""


class BoundsViolation(MedgroundError):
    """Annotation bounding box exceeds its image bounds."""


class WriteFailure(MedgroundError):
    """Output document could not be written."""


class DocumentError(MedgroundError):
    """Annotation or prediction document is structurally invalid."""


# --- grounding --------------------------------------------------------------

class EmptyConceptSet(MedgroundError):
    """Prompt construction requires at least one concept phrase."""


class SeparatorInPhrase(MedgroundError):
    """Concept phrase contains the prompt separator string."""


class ShapeMismatch(MedgroundError):
    """Matrix shapes or span indices are inconsistent."""


class EmptySpan(MedgroundError):
    """Phrase span contains no token indices."""


class UnmatchedBoxes(MedgroundError):
    """Box matching references predictions or ground truths that do not exist."""


class FeatureFileError(MedgroundError):
    """Binary feature matrix file is malformed."""


# --- evaluation -------------------------------------------------------------

class IdSpaceMismatch(MedgroundError):
    """Prediction document references image ids absent from the ground truth."""


# --- cli --------------------------------------------------------------------

class ConfigError(MedgroundError):
    """Pipeline configuration is invalid."""
