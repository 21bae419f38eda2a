"""Representation-conditioned generation at desk scale."""
