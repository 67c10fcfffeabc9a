"""Configuration, console logging and the shared exception tree."""
