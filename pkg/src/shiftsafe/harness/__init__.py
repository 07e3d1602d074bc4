"""Case-study experiment harness."""
