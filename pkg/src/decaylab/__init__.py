"""Learning-rate decay experiments on a tiny byte-level language model.

Closed-form LR schedules (WSO, WSD, Cosine, Linear and their mid-training
extension), a deterministic pre -> mid -> SFT training pipeline, and a
Hutchinson probe of the Hessian trace.
"""

__version__ = "0.1.0"
