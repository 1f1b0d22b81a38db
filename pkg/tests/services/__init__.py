"""Service tests package."""
