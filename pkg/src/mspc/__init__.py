"""mspc: lossless RGB image codec with a multi-scale progressive statistical model.

Pixels are split into nested scales and ordered groups; a convolutional
context model predicts a discretized mixture-of-logistics distribution for
every pixel still to be coded, and a byte-oriented range coder turns those
distributions into a bit-exact, fully reversible stream.
"""

__version__ = "0.1.0"
