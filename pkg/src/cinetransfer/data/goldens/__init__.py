"""Golden cases generated by the oracles."""
