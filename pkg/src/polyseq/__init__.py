"""Polyphonic music SeqGAN: MIDI tokenization, LSTM generator, CNN discriminator."""

__version__ = "0.1.0"
