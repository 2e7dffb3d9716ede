"""Voice-level estimation from uncalibrated recordings.

Two ways to learn a level estimator without calibrated data (a learned
per-group recording factor, or a closed-form adaptive factor with a
scalar-product loss), a toy conditional auto-encoder that shifts the voice
level of mel-spectrograms, and a synthetic corpus with known ground truth.
"""

__version__ = "0.1.0"
