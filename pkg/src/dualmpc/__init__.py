"""Dual-control tube MPC for linear systems with polytopic parameter uncertainty."""

from importlib.resources import files

__version__ = "0.1.0"


def example_config_path():
    """Path of the bundled two-state example experiment."""
    return files(__name__) / "data" / "example_sec6.yaml"
