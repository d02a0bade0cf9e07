"""Curriculum self-training for source-free domain adaptation on desk-scale benchmarks."""

__version__ = "0.1.0"
