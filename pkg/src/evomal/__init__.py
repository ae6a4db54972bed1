"""Evolutionary evasion and adversarial retraining for byte-level PE malware detectors."""

__version__ = "0.1.0"
