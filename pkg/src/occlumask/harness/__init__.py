"""Experiment driver: synthetic data, dataset IO, evaluation and result tables."""
