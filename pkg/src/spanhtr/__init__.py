"""Recurrence-free paragraph recognition: a fully convolutional network
trained with CTC on row-concatenated character lattices.

Modules: ``autodiff`` (numpy reverse-mode tensors), ``model``, ``ctc``,
``metrics``, ``data``, ``checkpoint``, ``training`` and ``cli``.
"""

__version__ = "0.1.0"
