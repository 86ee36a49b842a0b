"""octpad: OCT fingerprint presentation-attack detection laboratory.

Synthetic phantom generation, adaptive patch extraction, an attention-guided
dual-branch classifier with single-side-supervised segmentation, three
training strategies, and a full biometric evaluation harness (DET, EER,
HTER, AUC with grouped cross-validation).
"""

__version__ = "0.1.0"

from .errors import OctPadError  # noqa: F401
