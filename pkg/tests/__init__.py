"""
flotapinn Tests

This package contains unit and integration tests for flotapinn.
"""
