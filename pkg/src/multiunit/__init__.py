"""Multi-unit CTC acoustic modelling on numpy.

Modules: ``numcore`` (autodiff tensors and optimizers), ``units``
(vocabularies and tokenizers), ``ctc`` (loss and decoding), ``model``
(encoder with tapped auxiliary heads and an attention decoder), ``fusion``
(N-best rescoring), ``corpus`` (synthetic data, file formats, error rates),
``training`` and ``cli``.
"""

__version__ = "0.1.0"
