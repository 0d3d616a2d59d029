from __future__ import annotations

import logging
import os
import time
from typing import Iterable

import numpy as np
import torch

KB = 1024
"""Bytes per kilobyte used by every size report"""


class TinyLocError(Exception):
    """Base class for all errors raised by tinyloc"""
    pass


class DataFormatError(TinyLocError, ValueError):
    """Raised when an input dataset violates its column or label contract"""
    pass


class ConfigError(TinyLocError, ValueError):
    """Raised for unknown or malformed configuration settings"""
    pass


class ShapeError(TinyLocError, ValueError):
    """Raised when tensor dimensions do not line up"""
    pass


class TrainingDivergedError(TinyLocError, ArithmeticError):
    """Raised when a loss or gradient becomes non-finite during training"""
    pass


class QuantizationError(TinyLocError, ValueError):
    """Raised for degenerate quantization ranges or missing calibration data"""
    pass


class AlreadyQuantizedError(QuantizationError):
    """Raised when asked to quantize a model that already holds quantized layers"""
    pass


class ContainerFormatError(TinyLocError, ValueError):
    """Raised when a model or dataset container cannot be decoded"""
    pass


def init_logging(verbosity: int = 0) -> None:
    """Configure root logging for command-line use

    :param verbosity: 0 for warnings only, 1 for info, 2 or more for debug
    """
    msg_format = "%(asctime)s.%(msecs)03dZ:%(levelname)s:%(message)s"
    date_format = "%Y-%m-%dT%H:%M:%S"
    level = logging.WARN if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(format=msg_format, datefmt=date_format, level=level)
    logging.Formatter.converter = time.gmtime
    logging.getLogger().setLevel(level=level)


def seed_stream(seed: int, purpose: str) -> int:
    """Derive an independent seed for one consumer of randomness from the master seed

    The same (seed, purpose) pair always yields the same value, so split, init, and batching
    streams never share state.

    :param seed: master seed
    :param purpose: name of the consumer, e.g. 'split' or 'init'
    :return: derived seed in [0, 2**31)
    """
    entropy = [seed] + [ord(c) for c in purpose]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0] % (2 ** 31))


def torch_generator(seed: int, purpose: str) -> torch.Generator:
    """A seeded torch generator for the named randomness stream"""
    generator = torch.Generator()
    generator.manual_seed(seed_stream(seed, purpose))
    return generator


def numpy_rng(seed: int, purpose: str) -> np.random.Generator:
    """A seeded numpy generator for the named randomness stream"""
    return np.random.default_rng(seed_stream(seed, purpose))


def thread_cap() -> int:
    """Number of worker threads allowed for parallel evaluation, honouring TINYLOC_THREADS"""
    default = os.cpu_count() or 1
    value = os.environ.get('TINYLOC_THREADS')
    if not value:
        return default
    try:
        cap = int(value)
    except ValueError:
        raise ConfigError(f'TINYLOC_THREADS must be an integer, got "{value}"')
    if cap < 1:
        raise ConfigError(f'TINYLOC_THREADS must be at least 1, got {cap}')
    return cap


def flatten(collection: Iterable[list]) -> list:
    """Flatten one level of nested lists"""
    return [item for sublist in collection for item in sublist]


def ceil_kb(n_bytes: int) -> int:
    """Round a byte count up to whole kilobytes"""
    return -(-n_bytes // KB)
