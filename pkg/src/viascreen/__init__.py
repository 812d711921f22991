"""Toolkit for smartphone-based VIA cervical screening studies.

Covers the full desk-side pipeline: corpus ingestion and audit, expert
quality-control annotation (batch files or the bundled annotation service),
patient-level splits, cervix ROI cropping, the dual-input pre/post-acid
classifier, training, and evaluation with inter-rater agreement.
"""

__version__ = "0.1.0"
