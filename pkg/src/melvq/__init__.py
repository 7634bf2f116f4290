"""melvq: Mel spectrograms versus deep-VQ tokens/codebooks for genre recognition.

Desk-scale, fully verifiable pipeline: DSP front-end, trainable VQ-VAE codec,
three masked-pretrained transformer classifiers, artist-disjoint dataset
splits, and macro-F1 evaluation, all on a tape-autodiff tensor core with
finite-difference gradient checking.
"""

__version__ = "0.1.0"
