"""Bilevel broker-dealer / investor portfolio selection solvers."""
