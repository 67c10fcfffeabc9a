"""Metrics, baselines and forecast reports."""
