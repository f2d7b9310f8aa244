"""Language-model knowledge distillation into CTC speech recognisers, on synthetic data.

A numpy autodiff core, Conformer encoder, CTC loss and decoders, a masked-LM
teacher and the auxiliary attention decoders that carry its soft labels into
intermediate encoder layers.
"""

__version__ = "0.1.0"
