"""Zero-shot speaker-adaptive TTS and voice conversion with disentangled
speaker embeddings and a speaker-conditioned invertible flow."""

from .config import RunConfig, load_config, preset

__all__ = ["RunConfig", "load_config", "preset"]
__version__ = "0.1.0"
