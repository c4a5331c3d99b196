"""Test suite for kvsim."""
