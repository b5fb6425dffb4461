"""Tabular RL pipeline for choosing persuasive strategies from longitudinal session data."""

__version__ = "0.1.0"
