"""Denoiser, conditioning encoders and the refinement head."""
