"""Decentralized real-time energy trading on a linearized distribution network."""
__version__ = "0.1.0"
