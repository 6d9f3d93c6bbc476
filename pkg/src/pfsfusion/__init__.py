"""Multimodal PET/CT plus lab fusion for progression-free-survival classification, built on numpy."""

__version__ = "0.1.0"
