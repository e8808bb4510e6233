"""Data-pipeline and evaluation toolkit for mitotic-figure detection.

Hierarchical balanced sampling, grouped stratified cross-validation, point
detection evaluation, multi-rate EMA checkpoint ensembles, hard-negative
mining and test-time-augmentation fusion, runnable against any detector that
implements :class:`mitokit.detector.Detector`.
"""

__version__ = "0.1.0"
