"""Product data model, loaders and synthetic catalog."""
