"""Tests for the lowfr toolkit."""
