"""Mobility toolbox coordinator, tool selection, state transfer module and a handover simulator."""

__version__ = "0.1.0"
