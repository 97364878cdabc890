"""Self-questioning pipelines, instruction-data generation, and hallucination evals
for image-capable chat-completions backends."""

__version__ = "0.1.0"
