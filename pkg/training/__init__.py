"""Stage-1 trainer, checkpoints and the two-stage pipeline."""
