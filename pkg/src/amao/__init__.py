"""Desk-scale pipeline for executable adversarial examples via semantic-nop insertion.

Subpackages cover: a byte/image codec, a small verifiable instruction set
with assembler/disassembler/VM, the alignment dynamic program that places
semantic nops to match a target byte string, differentiable classifiers and
attacks, defenses, randomized-obfuscation baselines, insertion heuristics,
and the experiment harness gluing it all together.
"""

__version__ = "0.1.0"

from .image import GrayImage, WidthPolicy, bytes_to_image, image_to_bytes

__all__ = [
    "GrayImage",
    "WidthPolicy",
    "bytes_to_image",
    "image_to_bytes",
    "__version__",
]
