"""Schemas, configuration and on-disk formats."""
