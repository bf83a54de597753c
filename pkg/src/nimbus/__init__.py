"""Desk-scale precipitation nowcasting in pure numpy.

A small attention U-Net with hand-written backprop, a synthetic
advected-rain data pipeline, AdamW training with early stopping, and
critical-success-index evaluation, all deterministic end to end.
"""

__version__ = "0.1.0"
