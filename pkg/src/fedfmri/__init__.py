"""Privacy-preserving federated learning simulator for multi-site connectivity classification."""

__version__ = "0.1.0"
