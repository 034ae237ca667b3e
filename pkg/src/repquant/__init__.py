"""Reparameterizable conv blocks, exact fusion and INT8 quantization analysis."""
