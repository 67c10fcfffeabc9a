"""Noise schedule, forward noising, reverse sampling."""
