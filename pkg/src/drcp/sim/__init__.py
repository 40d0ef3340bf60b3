"""Synthetic cooperative-perception scenes, V2X channel model and experiment drivers."""
