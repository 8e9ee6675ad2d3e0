"""Independent reference implementations used to produce and check goldens."""
