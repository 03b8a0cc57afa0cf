"""Bundled desk-scale datasets shipped with the package."""

from pathlib import Path

_HERE = Path(__file__).resolve().parent


def bundled_cf_dir() -> Path:
    """Directory holding the bundled CF dataset (train.tsv / test.tsv)."""
    if not (_HERE / "train.tsv").exists():
        raise FileNotFoundError("bundled CF dataset missing; reinstall the package")
    return _HERE
