"""Subcommand handlers dispatched from app.py."""
