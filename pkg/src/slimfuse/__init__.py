"""Text-guided vision + radar grounding at desk scale.

A self-contained stack: a small autodiff engine (`nd`), radar point
projection and RVP rasterization (`radar`), adaptive radar weighting
(`arw`), slim/vanilla/linear cross attention with a cost auditor
(`attention`, `costs`), toy sensor/text encoders (`encoders`), the fusion
pipeline with detection and segmentation heads (`model`), multi-task
losses (`losses`), detection/segmentation metrics (`metrics`), a synthetic
grounding benchmark (`synth`), and a CLI (`cli`).
"""

__version__ = "0.1.0"
