"""Middleware tests package."""
