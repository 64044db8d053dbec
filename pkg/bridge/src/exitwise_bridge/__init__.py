"""Export bridge: converts CLIP vision checkpoints, prompt-ensemble text
embeddings, and pre-embedded image token sequences into the tensor-archive
format consumed by the exitwise inference engine."""

__version__ = "0.1.0"
