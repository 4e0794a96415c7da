"""Masked self-distillation pretraining for time-series encoders.

Submodules:
    ndgrad: numpy tensor with tape-based autodiff, Adam and OneCycle.
    encoder: dilated residual CNN encoder.
    distill: masking, teacher targets, EMA and the training step.
    heads: pooling plus logistic and ridge probes.
    data: loaders, normalization, cropping, windows, synthetic sets.
    cli: the ``tsdistill`` command.
"""

__version__ = "0.1.0"
