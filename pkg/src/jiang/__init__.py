"""Desk-scale decoder language-model stack.

Subpackages cover the tensor/autograd substrate, the decoder
architecture, the memory-bounded attention kernel, the byte-level BPE
tokenizer with CJK extension, the corpus filtering/selection pipeline,
and the training/evaluation harness. ``jiang.cli`` is the command-line
entry point.
"""

from .autograd import Tensor, backward, grad_check, no_grad
from .model import ModelConfig, DecoderWeights, decoder_forward, init_weights, param_count
from .flash_attention import HAVE_COMPILED, TileConfig, tiled_attention

__version__ = "0.1.0"
