"""Self-supervised contrastive pretraining for long-tail aerial wildlife detection."""

__version__ = "0.1.0"
