"""Shipped study configurations (JSON)."""
