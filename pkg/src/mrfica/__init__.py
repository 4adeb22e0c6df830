"""MR fingerprinting toolkit.

EPG simulation of fingerprint dictionaries, template matching (full
and SVD-compressed), synthetic phantoms, and a channel-attention
convolutional regressor for T1/T2 map reconstruction, with channel
selection and patch-size experiments on top.
"""

__version__ = "0.1.0"
