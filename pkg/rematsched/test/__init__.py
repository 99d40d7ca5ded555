"""Test submodule."""
