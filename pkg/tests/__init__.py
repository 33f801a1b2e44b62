"""Test suite for fewshotlib."""
