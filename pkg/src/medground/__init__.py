"""medground: build unified COCO-style grounding datasets from medical
segmentation sources, score phrase grounding over supplied feature matrices,
and evaluate detections with AP/AP50."""

__version__ = "0.1.0"
