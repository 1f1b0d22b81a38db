"""Middleware package for the command-line application."""
