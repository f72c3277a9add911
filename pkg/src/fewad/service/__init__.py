"""FastAPI service wrapping the core pipeline."""
