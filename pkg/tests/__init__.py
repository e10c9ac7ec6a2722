"""Test package for code-ssm."""
