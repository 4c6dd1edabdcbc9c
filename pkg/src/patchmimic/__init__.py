"""Anomaly detection from frozen-transformer patch embeddings.

Two shallow MLP students learn the forward/backward mappings between a
vision transformer's layer embeddings on nominal images; at test time their
prediction errors, fused per patch, localize defects. The evaluation side
implements per-region-overlap curves with partial-FPR integration,
anomaly-size quartile metrics, and the defect-size robustness score.
"""

__version__ = "0.1.0"
