"""Experiment runner: scenarios, run records and the command-line front end."""
