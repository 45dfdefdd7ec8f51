"""Wireless cardiac rhythm management emulator.

Emulated ECG/EGM sensors stream WFDB-format traces over lossy simulated radio
links to a Communicator that classifies fixed-length ECG windows with a small
feed-forward network, debounces the decisions, drives an emulated ICD/CRT and
appends reports to a hospital sink.
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
