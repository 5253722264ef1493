"""Desk-scale KAM toolkit for the dispersive Degasperis-Procesi equation."""

__version__ = "0.1.0"
