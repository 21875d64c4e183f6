"""Synthetic problem instances: ground truth, Gaussian design and labels."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loss import CROSS_ENTROPY, SQUARED, Loss
from .numerics import DimensionError, SeededRng, gs_block, inner

# child stream indices of an instance seed
STREAM_OMEGA0, STREAM_DESIGN, STREAM_LABELS, STREAM_INIT = 0, 1, 2, 3


class Channel:
    """Generating likelihood ``p0(y | theta)`` applied row-wise."""

    name = "channel"

    def sample(self, theta: np.ndarray, rng: SeededRng) -> np.ndarray:
        raise NotImplementedError


class SoftmaxChannel(Channel):
    """One-hot labels with ``P(class k) = softmax(theta)_k``.

    One uniform draw per row, inverted through the cumulative probabilities.
    """

    name = "softmax"

    def sample(self, theta, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        z = theta - theta.max(axis=1, keepdims=True)
        p = np.exp(z)
        cdf = np.cumsum(p, axis=1)
        u = rng.uniform(theta.shape[0]) * cdf[:, -1]
        k = (cdf < u[:, None]).sum(axis=1)
        k = np.minimum(k, theta.shape[1] - 1)
        y = np.zeros_like(theta)
        y[np.arange(theta.shape[0]), k] = 1.0
        return y


class GaussianChannel(Channel):
    """``y = theta + noise_std * N(0, I)``; pairs with the squared loss."""

    name = "gaussian"

    def __init__(self, noise_std: float = 1.0):
        self.noise_std = float(noise_std)

    def sample(self, theta, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return theta + self.noise_std * rng.normal(theta.shape)


@dataclass(frozen=True)
class Problem:
    """A fitting loss paired with the channel that generates the labels."""

    loss: Loss
    channel: Channel

    @property
    def name(self) -> str:
        return f"{self.loss.name}/{self.channel.name}"


SOFTMAX_PROBLEM = Problem(CROSS_ENTROPY, SoftmaxChannel())
SQUARED_PROBLEM = Problem(SQUARED, GaussianChannel(1.0))

PROBLEMS = {"softmax": SOFTMAX_PROBLEM, "squared": SQUARED_PROBLEM}


@dataclass
class GroundTruth:
    omega0: np.ndarray
    r0: np.ndarray
    B0: np.ndarray
    C0: np.ndarray

    @property
    def d(self) -> int:
        return self.omega0.shape[0]

    @property
    def K(self) -> int:
        return self.omega0.shape[1]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    alpha: float

    @property
    def n(self) -> int:
        return self.X.shape[0]


def qr_overlap(omega0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``omega0 = r0 @ B0`` with ``<r0, r0> = I`` and ``B0 = <r0, omega0>``."""
    r0 = gs_block(omega0, [])
    return r0, inner(r0, omega0)


def sample_ground_truth(d: int, K: int, rng: SeededRng, exact_overlap: bool = True) -> GroundTruth:
    """Ground truth with ``<omega0, omega0> = I`` (default) or i.i.d. N(0, 1) rows."""
    if d < K:
        raise DimensionError(f"need d >= K, got d={d}, K={K}")
    W = rng.normal((d, K))
    if exact_overlap:
        omega0 = gs_block(W, [])
        # re-normalize once more so <omega0, omega0> = I to rounding
        omega0 = gs_block(omega0, [])
        return GroundTruth(omega0, omega0.copy(), np.eye(K), inner(omega0, omega0))
    r0, B0 = qr_overlap(W)
    return GroundTruth(W, r0, B0, inner(W, W))


def n_samples(alpha: float, d: int) -> int:
    return int(round(alpha * d))


def sample_design(n: int, d: int, rng: SeededRng) -> np.ndarray:
    """``n x d`` design with i.i.d. N(0, 1/d) entries, generated in place."""
    X = np.empty((n, d))
    rng.generator().standard_normal(out=X)
    X *= 1.0 / np.sqrt(d)
    return X


def sample_labels(theta: np.ndarray, rng: SeededRng, channel: Channel | None = None) -> np.ndarray:
    return (channel or SoftmaxChannel()).sample(theta, rng)


def make_instance(d: int, K: int, alpha: float, rng: SeededRng,
                  problem: Problem = SOFTMAX_PROBLEM, exact_overlap: bool = True) -> tuple[GroundTruth, Dataset]:
    gt = sample_ground_truth(d, K, rng.child(STREAM_OMEGA0), exact_overlap)
    n = n_samples(alpha, d)
    X = sample_design(n, d, rng.child(STREAM_DESIGN))
    y = problem.channel.sample(X @ gt.omega0, rng.child(STREAM_LABELS))
    return gt, Dataset(X, y, n / d)


# Binary dump: 32-byte little-endian header then omega0, X, y as float64.
_MAGIC = b"AMPD"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")  # magic, version, d, n, K -> 4+4+8+8+8 = 32


def dump_instance(path, omega0: np.ndarray, X: np.ndarray | None, y: np.ndarray | None) -> None:
    d, K = omega0.shape
    n = 0 if X is None else X.shape[0]
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, d, n, K))
        fh.write(np.ascontiguousarray(omega0, dtype="<f8").tobytes())
        if n:
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(y, dtype="<f8").tobytes())


def load_instance(path):
    with open(Path(path), "rb") as fh:
        magic, version, d, n, K = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or version != _VERSION:
            raise ValueError(f"{path}: not an AMPD v{_VERSION} file")
        body = np.frombuffer(fh.read(), dtype="<f8")
    omega0 = body[: d * K].reshape(d, K)
    if n == 0:
        return omega0, None, None
    X = body[d * K: d * K + n * d].reshape(n, d)
    y = body[d * K + n * d:].reshape(n, K)
    return omega0, X, y
