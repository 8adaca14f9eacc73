"""srquant: quantization-aware training for a miniature super-resolution
network, with channel-wise distribution offsets, cooperative variance
regularization, and exact storage/BitOPs accounting."""

__version__ = "0.1.0"
