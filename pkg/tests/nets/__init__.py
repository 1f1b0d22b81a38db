"""Network tests package."""
