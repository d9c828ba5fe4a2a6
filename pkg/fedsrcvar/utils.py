import logging
import os
import subprocess  # nosec
from pathlib import Path
from shutil import move, rmtree
from typing import Union


def setup_logging(verbose: bool = False):
    level = logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.getLogger("fedsrcvar").setLevel(level)


def git_describe() -> str:
    """Build identifier of the checkout the package runs from"""
    try:
        out = subprocess.run(  # nosec
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def atomic_move(source: Union[str, Path], destination: Union[str, Path]):
    """Move a finished staging directory into place, replacing any previous one"""
    source, destination = Path(source), Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    if destination.exists():
        rmtree(destination)
    try:
        os.replace(source, destination)
    except OSError:
        # different file systems
        move(str(source), str(destination))


def remove_dir(directory: Union[str, Path]):
    directory = Path(directory)
    if directory.is_dir():
        rmtree(directory)


def format_float(value: float) -> str:
    # compact and stable across platforms, used in run ids
    return f"{value:g}"
