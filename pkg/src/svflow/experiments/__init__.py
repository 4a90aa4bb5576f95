"""Experiment configs, runners and the ``svflow`` command line."""
