"""Complex-spectrogram speech enhancement with frequency transformation blocks and a
dual-path attention RNN bottleneck, plus an ACE cochlear-implant simulator."""

__version__ = "0.1.0"
