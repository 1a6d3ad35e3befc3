"""detlab: a desk-scale object-detection training laboratory.

Pretrain a small classification backbone, reuse it in detectors of
configurable capacity under four regimes (scratch, fine-tune, freeze,
freeze + residual adapters), measure COCO-protocol mAP with frequency and
size strata, and account for exactly how many parameters and FLOPs each
regime trains.
"""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor, backward, record

__all__ = ["Parameter", "Tape", "Tensor", "backward", "record", "__version__"]
