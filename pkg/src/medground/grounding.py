"""Phrase-grounding math over supplied feature matrices.

Detection-as-grounding: classes become phrases in a prompt, and a region is
scored against every prompt token by a sigmoid of the feature dot product.
Everything here is a pure function of the inputs; region features, token
features, and optional classifier weights arrive through feature files (one
region-feature file per imaging modality, one shared token-feature file),
never from an embedded encoder.

Shapes follow one convention throughout: region features are (N, d), token
features (M, d), alignment scores (N, M), phrase-level targets (N, c), and
token-level targets (N, M).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    DimMismatch,
    EmptyConceptSet,
    EmptySpan,
    SeparatorInPhrase,
    ShapeMismatch,
    UnmatchedBoxes,
)
from .geometry import BBox

PROMPT_PREFIX = "Detect: "
SEPARATOR = ", "

# probability clamp used by every cross-entropy evaluation
EPS = 1e-7

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_WORD_RE = re.compile(r"[a-z0-9]+$")


@dataclass(frozen=True)
class GroundingPrompt:
    """Prompt text plus the ordered concept phrases it was built from."""

    text: str
    concepts: tuple


def build_prompt(concepts) -> GroundingPrompt:
    """Construct the detection prompt: 'Detect: ' + comma-joined concepts."""
    concepts = tuple(concepts)
    if not concepts:
        raise EmptyConceptSet("need at least one concept phrase")
    for phrase in concepts:
        if not isinstance(phrase, str) or not phrase:
            raise EmptyConceptSet(f"concept phrases must be non-empty strings, got {phrase!r}")
        if SEPARATOR in phrase:
            raise SeparatorInPhrase(f"phrase {phrase!r} contains the separator {SEPARATOR!r}")
    return GroundingPrompt(text=PROMPT_PREFIX + SEPARATOR.join(concepts), concepts=concepts)


@dataclass(frozen=True)
class PhraseSpanMap:
    """Token sequence of a prompt plus per-phrase token-index spans.

    Spans are disjoint and nonempty; together with non_phrase (punctuation,
    separators, padding) they cover every token index exactly once.
    """

    tokens: tuple
    spans: tuple  # one frozenset of token indices per phrase, in phrase order
    non_phrase: frozenset

    def __post_init__(self):
        m = len(self.tokens)
        seen: set[int] = set()
        for k, span in enumerate(self.spans):
            if not span:
                raise EmptySpan(f"phrase {k} has an empty token span")
            if any(j < 0 or j >= m for j in span):
                raise ShapeMismatch(f"phrase {k} span {sorted(span)} outside 0..{m - 1}")
            if seen & span:
                raise ShapeMismatch(f"phrase {k} span overlaps another span")
            seen |= span
        if seen & self.non_phrase:
            raise ShapeMismatch("non-phrase indices overlap a phrase span")
        if seen | self.non_phrase != set(range(m)):
            raise ShapeMismatch("spans plus non-phrase indices must cover every token")

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def num_phrases(self) -> int:
        return len(self.spans)

    def as_records(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "spans": [sorted(span) for span in self.spans],
            "non_phrase": sorted(self.non_phrase),
        }

    @classmethod
    def from_records(cls, obj: dict) -> "PhraseSpanMap":
        return cls(
            tokens=tuple(obj["tokens"]),
            spans=tuple(frozenset(span) for span in obj["spans"]),
            non_phrase=frozenset(obj["non_phrase"]),
        )


def tokenize_prompt(prompt: GroundingPrompt, subword_table: dict | None = None) -> PhraseSpanMap:
    """Deterministic whitespace+punctuation tokenization with phrase spans.

    Lowercased words and single punctuation marks become tokens; the prompt
    prefix, ':' and the separating commas land in non_phrase. A subword
    table may expand any word into listed pieces, all inheriting the word's
    phrase span. This splitter stands in for an external language-model
    tokenizer; only the span-map contract matters downstream.
    """
    subword_table = subword_table or {}
    tokens: list[str] = ["detect", ":"]
    non_phrase = {0, 1}
    spans: list[frozenset] = []
    for k, phrase in enumerate(prompt.concepts):
        if k > 0:
            non_phrase.add(len(tokens))
            tokens.append(",")
        span: set[int] = set()
        for piece in _TOKEN_RE.findall(phrase.lower()):
            if _WORD_RE.match(piece):
                for sub in subword_table.get(piece, [piece]):
                    span.add(len(tokens))
                    tokens.append(sub)
            else:
                non_phrase.add(len(tokens))
                tokens.append(piece)
        spans.append(frozenset(span))
    return PhraseSpanMap(tokens=tuple(tokens), spans=tuple(spans), non_phrase=frozenset(non_phrase))


# --------------------------------------------------------------------------
# Targets and scores
# --------------------------------------------------------------------------


def _as_binary(matrix, name: str) -> np.ndarray:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if m.size and not np.isin(m, (0, 1)).all():
        raise ShapeMismatch(f"{name} must be binary")
    return m.astype(np.int8)


def expand_targets(phrase_targets, span_map: PhraseSpanMap) -> np.ndarray:
    """Spread phrase-level targets onto token columns.

    Row i gets a 1 exactly at the span indices of every phrase positive in
    that row; separator/padding columns stay 0. The expansion is monotone
    and OR-linear in the phrase targets.
    """
    t = _as_binary(phrase_targets, "phrase targets")
    if t.shape[1] != span_map.num_phrases:
        raise ShapeMismatch(f"targets have {t.shape[1]} phrases, span map has {span_map.num_phrases}")
    out = np.zeros((t.shape[0], span_map.num_tokens), dtype=np.int8)
    for k, span in enumerate(span_map.spans):
        idx = sorted(span)
        out[:, idx] = np.maximum(out[:, idx], t[:, k : k + 1])
    return out


def alignment_scores(region_features, token_features) -> np.ndarray:
    """Sigmoid of the region-token feature dot products.

    Result entries are clamped into the open interval (0, 1) at float64
    resolution, so downstream log-space math never sees exact 0 or 1.
    """
    f = np.asarray(region_features, dtype=np.float64)
    t = np.asarray(token_features, dtype=np.float64)
    if f.ndim != 2 or t.ndim != 2:
        raise DimMismatch(f"expected 2-D feature matrices, got {f.shape} and {t.shape}")
    if f.shape[1] != t.shape[1]:
        raise DimMismatch(f"feature width mismatch: {f.shape[1]} vs {t.shape[1]}")
    scores = expit(f @ t.T)
    return np.clip(scores, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def aggregate_phrase_probs(scores, span_map: PhraseSpanMap, aggregator: str = "mean") -> np.ndarray:
    """Collapse token probabilities back to per-phrase probabilities.

    Mean over each phrase's token span by default; 'max' is available for
    sensitivity checks. Singleton spans reduce to the identity either way.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeMismatch(f"scores must be 2-D, got shape {s.shape}")
    if aggregator not in ("mean", "max"):
        raise ValueError(f"aggregator must be 'mean' or 'max', got {aggregator!r}")
    out = np.empty((s.shape[0], span_map.num_phrases), dtype=np.float64)
    for k, span in enumerate(span_map.spans):
        if not span:
            raise EmptySpan(f"phrase {k} has an empty span")
        idx = sorted(span)
        if max(idx) >= s.shape[1]:
            raise ShapeMismatch(f"span index {max(idx)} outside score columns 0..{s.shape[1] - 1}")
        block = s[:, idx]
        out[:, k] = block.mean(axis=1) if aggregator == "mean" else block.max(axis=1)
    return out


def classification_logits(region_features, head_weights) -> np.ndarray:
    """Plain classifier-head logits for the baseline detection path."""
    f = np.asarray(region_features, dtype=np.float64)
    w = np.asarray(head_weights, dtype=np.float64)
    if f.ndim != 2 or w.ndim != 2 or f.shape[1] != w.shape[1]:
        raise DimMismatch(f"incompatible shapes {f.shape} and {w.shape}")
    return f @ w.T


def score_regions(region_features, token_features, span_map: PhraseSpanMap, aggregator: str = "mean") -> np.ndarray:
    """Zero-shot phrase probabilities: score, then aggregate per phrase."""
    return aggregate_phrase_probs(alignment_scores(region_features, token_features), span_map, aggregator)


# --------------------------------------------------------------------------
# Composite loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetMatrices:
    """Ground-truth bundle for loss computation.

    phrase_targets is the (N, c) binary matrix; token_targets its (N, M)
    expansion. gt_boxes lists the ground-truth boxes referenced by a
    matching. head_weights optionally carries (c, d) classifier weights for
    the baseline path.
    """

    phrase_targets: np.ndarray
    token_targets: np.ndarray | None = None
    gt_boxes: tuple = ()
    head_weights: np.ndarray | None = None


@dataclass(frozen=True)
class GroundingLoss:
    cls: float
    loc: float

    @property
    def total(self) -> float:
        return self.cls + self.loc


def _clamp(probs: np.ndarray) -> np.ndarray:
    return np.clip(probs, EPS, 1.0 - EPS)


def bce_loss(probs, targets, focal_gamma: float | None = None) -> float:
    """Mean binary cross-entropy over all cells, probabilities clamped.

    focal_gamma, when set, multiplies each cell by (1 - p_t)^gamma; it
    defaults to off and is excluded from the analytic-gradient path.
    """
    p = _clamp(np.asarray(probs, dtype=np.float64))
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"probabilities {p.shape} vs targets {t.shape}")
    cell = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    if focal_gamma is not None:
        p_t = t * p + (1.0 - t) * (1.0 - p)
        cell = (1.0 - p_t) ** focal_gamma * cell
    return float(cell.mean())


def bce_loss_and_grad(logits, targets) -> tuple[float, np.ndarray]:
    """Mean BCE of sigmoid(logits) and its exact gradient w.r.t. the logits.

    Cells whose probability sits at the clamp boundary contribute zero
    gradient, matching the clamped forward value exactly.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {t.shape}")
    p = expit(z)
    loss = bce_loss(p, t)
    inside = (p > EPS) & (p < 1.0 - EPS)
    grad = np.where(inside, p - t, 0.0) / z.size
    return loss, grad


def boxes_to_array(boxes) -> np.ndarray:
    """(n, 4) float array from BBox objects or raw 4-sequences."""
    rows = []
    for b in boxes:
        if isinstance(b, BBox):
            rows.append([b.x, b.y, b.w, b.h])
        else:
            rows.append(list(b))
    out = np.asarray(rows, dtype=np.float64)
    if out.size and out.shape[1] != 4:
        raise ShapeMismatch(f"boxes must have 4 coordinates, got shape {out.shape}")
    return out.reshape(-1, 4)


def _validate_matching(matching, n_pred: int, n_gt: int) -> list:
    pairs = [(int(i), int(j)) for i, j in matching]
    for i, j in pairs:
        if not (0 <= i < n_pred and 0 <= j < n_gt):
            raise UnmatchedBoxes(f"matching pair ({i}, {j}) outside {n_pred} predictions / {n_gt} ground truths")
    if len({i for i, _ in pairs}) != len(pairs) or len({j for _, j in pairs}) != len(pairs):
        raise UnmatchedBoxes("matching must be one-to-one")
    return pairs


def _normalized_residuals(pred: np.ndarray, gt: np.ndarray, pairs, image_size) -> np.ndarray:
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    scale = np.array([w, h, w, h], dtype=np.float64)
    pi = np.array([i for i, _ in pairs], dtype=int)
    gj = np.array([j for _, j in pairs], dtype=int)
    return (pred[pi] - gt[gj]) / scale


def smooth_l1_loss(pred_boxes, gt_boxes, matching, image_size) -> float:
    """Mean smooth-L1 over matched box coordinates, normalized by image size.

    Zero when the matching is empty. Residuals below 1 in magnitude follow
    the quadratic branch 0.5*r^2, the rest the linear branch |r| - 0.5.
    """
    pred = boxes_to_array(pred_boxes)
    gt = boxes_to_array(gt_boxes)
    pairs = _validate_matching(matching, len(pred), len(gt))
    if not pairs:
        return 0.0
    r = _normalized_residuals(pred, gt, pairs, image_size)
    cell = np.where(np.abs(r) < 1.0, 0.5 * r * r, np.abs(r) - 0.5)
    return float(cell.mean())


def smooth_l1_loss_and_grad(pred_boxes, gt_boxes, matching, image_size) -> tuple[float, np.ndarray]:
    """smooth_l1_loss plus its gradient w.r.t. the raw predicted coordinates."""
    pred = boxes_to_array(pred_boxes)
    gt = boxes_to_array(gt_boxes)
    pairs = _validate_matching(matching, len(pred), len(gt))
    grad = np.zeros_like(pred)
    if not pairs:
        return 0.0, grad
    w, h = image_size
    scale = np.array([w, h, w, h], dtype=np.float64)
    r = _normalized_residuals(pred, gt, pairs, image_size)
    cell = np.where(np.abs(r) < 1.0, 0.5 * r * r, np.abs(r) - 0.5)
    dr = np.where(np.abs(r) < 1.0, r, np.sign(r))
    for row, (i, _) in enumerate(pairs):
        grad[i] += dr[row] / scale / r.size
    return float(cell.mean()), grad


def _giou(a: np.ndarray, b: np.ndarray) -> float:
    ax0, ay0, ax1, ay1 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx0, by0, bx1, by1 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    cw = max(ax1, bx1) - min(ax0, bx0)
    ch = max(ay1, by1) - min(ay0, by0)
    hull = cw * ch
    iou_val = inter / union if union > 0 else 0.0
    return iou_val - (hull - union) / hull if hull > 0 else iou_val


def localization_loss(pred_boxes, gt_boxes, matching, image_size=None, kind: str = "smooth_l1") -> float:
    """Box regression loss; smooth_l1 (default), l1, or giou."""
    if kind == "smooth_l1":
        return smooth_l1_loss(pred_boxes, gt_boxes, matching, image_size)
    pred = boxes_to_array(pred_boxes)
    gt = boxes_to_array(gt_boxes)
    pairs = _validate_matching(matching, len(pred), len(gt))
    if not pairs:
        return 0.0
    if kind == "l1":
        r = _normalized_residuals(pred, gt, pairs, image_size)
        return float(np.abs(r).mean())
    if kind == "giou":
        return float(np.mean([1.0 - _giou(pred[i], gt[j]) for i, j in pairs]))
    raise ValueError(f"unknown localization loss {kind!r}")


def grounding_loss(
    scores,
    targets: TargetMatrices,
    pred_boxes=(),
    matching=(),
    image_size=None,
    path: str = "grounding",
    loc_loss: str = "smooth_l1",
    focal_gamma: float | None = None,
) -> GroundingLoss:
    """Composite training objective: classification plus localization.

    path='grounding' reads ``scores`` as (N, M) alignment probabilities and
    scores them against the expanded token targets; path='baseline' reads
    ``scores`` as (N, c) classifier logits (sigmoid applied here) against
    the phrase targets. The caller supplies the prediction-to-ground-truth
    box matching; this module does not assign boxes.
    """
    s = np.asarray(scores, dtype=np.float64)
    if path == "grounding":
        if targets.token_targets is None:
            raise ShapeMismatch("grounding path needs token_targets (expanded matrix)")
        target = np.asarray(targets.token_targets)
        if s.shape != target.shape:
            raise ShapeMismatch(f"scores {s.shape} vs token targets {target.shape}")
        cls = bce_loss(s, target, focal_gamma=focal_gamma)
    elif path == "baseline":
        target = np.asarray(targets.phrase_targets)
        if s.shape != target.shape:
            raise ShapeMismatch(f"logits {s.shape} vs phrase targets {target.shape}")
        cls = bce_loss(expit(s), target, focal_gamma=focal_gamma)
    else:
        raise ValueError(f"path must be 'grounding' or 'baseline', got {path!r}")
    loc = localization_loss(pred_boxes, targets.gt_boxes, matching, image_size, kind=loc_loss)
    return GroundingLoss(cls=cls, loc=loc)
