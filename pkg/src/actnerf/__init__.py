"""A small from-scratch NeRF engine with activation-informed sampling."""

__version__ = "0.1.0"
