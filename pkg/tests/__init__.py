"""Test package for the feedback-graph ensemble simulator."""
