"""
General Utilities Module

This module contains the general-purpose pieces shared by every other module in
motiontools: the exception hierarchy, the rich console used for human-facing
output, logging setup, and a few small array helpers.

Functions:
    mat_build: Constructs a numpy matrix from dimensions and a flat list of values
    get_logger: Returns a package logger for a module
    setup_logging: Routes package logging through a rich handler
    report_value: Prints a named quantity using the package colour convention

Classes:
    MotionToolsError and its subclasses (see below)

Notes:
    Every error raised on purpose by the package derives from MotionToolsError,
    so callers (and the command line front end) can catch a single type. The
    concrete subclasses also derive from the closest builtin exception, so
    ``except ValueError`` keeps working for shape and configuration problems.
"""

import logging

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

console = Console()

PACKAGE_LOGGER = "motiontools"


class MotionToolsError(Exception):
    """Base class of every error raised on purpose by motiontools."""


class ShapeError(MotionToolsError, ValueError):
    """Tensor or array dimensions do not agree."""


class ConfigError(MotionToolsError, ValueError):
    """A configuration value violates its documented constraint."""


class ContractError(MotionToolsError, RuntimeError):
    """An API precondition was violated by the caller."""


class NonFiniteError(MotionToolsError, FloatingPointError):
    """NaN or Inf appeared in tensor data."""


class SingularAffineError(MotionToolsError, ArithmeticError):
    """An affine matrix is too close to singular to be inverted."""

    def __init__(self, det, message=None):
        self.det = float(det)
        super().__init__(message or f"affine matrix is singular: |det| = {abs(self.det):.3e} <= 1e-8")


class DatasetError(MotionToolsError, OSError):
    """A dataset is empty, unreadable or inconsistent."""


class CheckpointError(MotionToolsError, OSError):
    """A checkpoint file cannot be read or written."""


class CheckpointMismatchError(CheckpointError):
    """A checkpoint's configuration disagrees with what the caller expects."""

    def __init__(self, fields, details):
        self.fields = list(fields)
        super().__init__("checkpoint/config mismatch in fields: " + "; ".join(details))


class TrainingDivergedError(MotionToolsError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, step, last_checkpoint):
        self.step = step
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint if last_checkpoint is not None else "none saved yet"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {where}")


def get_logger(name):
    """Return the logger for a module (``get_logger(__name__)``)."""
    return logging.getLogger(name)


def setup_logging(level=logging.INFO):
    """
    Route package logging through a single rich handler.

    Args:
        level (int or str): Logging level for the ``motiontools`` logger.

    Returns:
        logging.Logger: The configured package logger.

    Notes:
        Calling this more than once replaces the handler instead of stacking
        duplicates.
    """
    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger


def report_value(name, value, unit="", fmt=".4f"):
    """
    Print a named quantity with the package colour convention.

    Quantity names are printed in bright cyan and values in bright red, the
    convention used for every human-facing number in motiontools.

    Args:
        name (str): Quantity name, e.g. ``"L1"``.
        value (float, int or str): The value. Numbers are formatted with ``fmt``.
        unit (str, optional): Unit suffix, e.g. ``"px"``.
        fmt (str, optional): Format spec for numeric values (default ".4f").

    Examples:
        >>> report_value("AKD_px", 3.25, "px")
    """
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        text = f"{value:d}"
    elif isinstance(value, (float, np.floating)):
        text = f"{value:{fmt}}"
    else:
        text = str(value)
    suffix = f" {unit}" if unit else ""
    console.print(f"[bright_cyan]{name}[/bright_cyan] = [bright_red]{text}[/bright_red]{suffix}")


def mat_build(dimensions, values):
    """
    Build a float64 numpy array from dimensions and a flat list of values.

    Values are arranged in row-major order (left-to-right, top-to-bottom).
    Used when reading affine matrices back from JSON, where they may arrive
    either nested or flattened.

    Args:
        dimensions (tuple): Target shape, e.g. ``(2, 2)``.
        values (list or array-like): Values to place, nested or flat. Must
            contain exactly ``prod(dimensions)`` numbers.

    Returns:
        numpy.ndarray: Array of the requested shape, dtype float64.

    Raises:
        ShapeError: If the number of values does not match the dimensions.

    Examples:
        >>> mat_build((2, 2), [1, 0, 0, 1])
        array([[1., 0.],
               [0., 1.]])
    """
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    expected = int(np.prod(dimensions))
    if flat.size != expected:
        raise ShapeError(f"expected {expected} values for shape {tuple(dimensions)}, got {flat.size}")
    return flat.reshape(dimensions)
