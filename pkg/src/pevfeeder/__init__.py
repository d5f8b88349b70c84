"""PEV charging impact simulation on unbalanced radial distribution feeders."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(name: str) -> Path:
    """Absolute path of a bundled data file (feeder, profile, benchmark, config)."""
    return Path(resources.files(__package__) / "data" / name)
