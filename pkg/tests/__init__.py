"""Test package for the forgery localization toolkit."""
