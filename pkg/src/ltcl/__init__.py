"""Desk-scale lab for decoupled supervised contrastive learning with
patch-based self distillation on synthetic long-tailed image data."""

__version__ = "0.1.0"
