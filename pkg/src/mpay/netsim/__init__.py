"""Framed transport: a deterministic simulator and a localhost TCP host."""
