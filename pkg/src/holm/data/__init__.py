"""Bundled scenarios, golden traces, wire vectors and sample profiles."""
