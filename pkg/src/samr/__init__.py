"""Lesion-mask conditioned synthesis of multi-sequence brain MR slices.

Subpackages map onto the pipeline: ``data`` (types + archives), ``phantom``
(synthetic corpus + atlas), ``maskops`` (ROI algebra and lesion edits),
``generator`` / ``discriminator`` / ``segmenter`` (networks), ``losses``,
``trainer``, ``evaluate`` and ``cli``.
"""

__version__ = "0.1.0"

SEQUENCES = ("T1w", "Gd-T1w", "T2w", "FLAIR", "APTw")
LABELS = ("background", "normal_brain", "edema", "cavity", "tumor")
NUM_CLASSES = len(LABELS)
NUM_SEQUENCES = len(SEQUENCES)
ATLAS_SLICES = 3
ATLAS_CHANNELS = ATLAS_SLICES * NUM_SEQUENCES
LESION_LABELS = (2, 3, 4)
