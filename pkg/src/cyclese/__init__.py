"""Cycle-consistent speech-feature enhancement (CSE / ACSE) on numpy.

Modules: ``features`` (log-mel front-end, deltas, normalization, FTR1/NRM1
files), ``nn`` (LSTMP mapping networks, discriminators, gradient reversal,
finite-difference checker), ``losses``, ``trainers`` (SGD with momentum,
staged schedules, CKP1 checkpoints), ``corpus`` (synthetic data and
metrics) and ``cli``.
"""

__version__ = "0.1.0"
