"""Downstream heads fine-tuned from pretrained encoders."""

from .backbone import load_backbone
from .classify import Classifier, MissingLabelsError, classification_inputs, train_classifier
from .detection import DetectionResult, Detector, detect, detect_breast, finetune_detector, nms
from .export import prediction_record, write_predictions
from .matching import (MatchCandidate, Matcher, breast_pairs, build_candidates, greedy_match, match,
                       matching_accuracy, train_matcher)
from .roi import RoiPatch, anatomical_gate, extract_roi, label_candidates, roi_square

__all__ = [
    "Classifier", "DetectionResult", "Detector", "MatchCandidate", "Matcher", "MissingLabelsError",
    "RoiPatch", "anatomical_gate", "breast_pairs", "build_candidates", "classification_inputs",
    "detect", "detect_breast", "extract_roi", "finetune_detector", "greedy_match", "label_candidates",
    "load_backbone", "match", "matching_accuracy", "nms", "prediction_record", "roi_square",
    "train_classifier", "train_matcher", "write_predictions",
]
