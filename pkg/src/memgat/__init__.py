"""Memory-augmented conditional generative adversarial transformers."""
