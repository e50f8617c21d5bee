"""Identify sequences of short actions from multichannel time series."""
from .core import (ActionSequence, FeatureSequence, FrameLabeling, LabeledSample, LabelVocab,
                   Segment, SegmentList, collapse, segments_from_frames)
from .errors import ActSeqError, ConfigError, FormatError, NumericError, ShapeError
from .metrics import aer, align, edit_score, evaluate, levenshtein

__all__ = [
    "ActionSequence", "FeatureSequence", "FrameLabeling", "LabeledSample", "LabelVocab",
    "Segment", "SegmentList", "collapse", "segments_from_frames",
    "ActSeqError", "ConfigError", "FormatError", "NumericError", "ShapeError",
    "aer", "align", "edit_score", "evaluate", "levenshtein",
]
