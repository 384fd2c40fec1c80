"""Tests for the histoseg package."""
