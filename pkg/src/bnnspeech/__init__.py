"""Binary neural network speech embeddings: packed-bit inference, distillation
and probing on a numpy core."""

from .architectures import build, build_densenet28, build_meliusnet22, build_tiny
from .frontend import Waveform, load_audio, log_mel, model_input
from .graph import LayerGraph, forward
from .modelio import load, save, size_report
from .tensor import BitTensor, pack, unpack, xnor_popcount_dot

__version__ = "0.1.0"

__all__ = ["BitTensor", "LayerGraph", "Waveform", "build", "build_densenet28",
           "build_meliusnet22", "build_tiny", "forward", "load", "load_audio", "log_mel",
           "model_input", "pack", "save", "size_report", "unpack", "xnor_popcount_dot"]
