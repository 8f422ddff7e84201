"""Frozen-feature extraction, probes, MIL aggregation and reports."""
