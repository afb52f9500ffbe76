"""Embedding datasets: CSV I/O and the synthetic source/target generator.

CSV format: one sample per line, an integer label (0 or 1) followed by the
embedding values, comma separated. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.linalg import expm

from .errors import DataError

EMBEDDING_WIDTH = 768


def _open_text(path, mode):
    path = os.fspath(path)
    if path.endswith(".gz"):
        # mtime=0 keeps written archives byte-identical across runs
        raw = gzip.open(path, "rb") if mode == "r" else gzip.GzipFile(path, "wb", mtime=0)
        return io.TextIOWrapper(raw, encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def read_csv(path, width: int | None = EMBEDDING_WIDTH) -> tuple:
    """Return (features, labels); malformed rows raise DataError naming the line."""
    rows, labels = [], []
    try:
        fh = _open_text(path, "r")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            try:
                label = int(fields[0])
                values = [float(v) for v in fields[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row") from None
            if label not in (0, 1):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            expected = width if width is not None else (len(rows[0]) if rows else len(values))
            if len(values) != expected:
                raise DataError(f"{path}:{lineno}: expected {expected} values, got {len(values)}")
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(values)
            labels.append(label)
    w = width if width is not None else 0
    x = np.array(rows, dtype=np.float64) if rows else np.zeros((0, w))
    return x, np.array(labels, dtype=np.int64)


def write_csv(path, x, y, header: str | None = None, precision: int = 6):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y).ravel()
    if x.shape[0] != y.size:
        raise DataError("features and labels disagree in length")
    with _open_text(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for label, row in zip(y, x):
            fh.write(str(int(label)) + "," + ",".join(f"{v:.{precision}g}" for v in row) + "\n")


@dataclass(frozen=True)
class DomainPair:
    """Two related labelled domains; the target is a small rotation of the source."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def _clusters(rng, n, mean, noise):
    y = rng.integers(0, 2, n)
    x = np.where(y[:, None] == 1, mean, -mean) + noise * rng.standard_normal((n, mean.size))
    return x, y


def small_rotation(dim: int, angle: float, rng) -> np.ndarray:
    """Random orthogonal map exp(A) with A skew-symmetric and spectral scale ``angle``."""
    a = rng.standard_normal((dim, dim))
    a = (a - a.T) / np.sqrt(2 * dim)
    return expm(angle * a)


def make_domain_pair(seed: int = 0, n_source: int = 2000, n_target: int = 4000,
                     n_test: int = 1000, dim: int = EMBEDDING_WIDTH, separation: float = 0.15,
                     noise: float = 1.0, angle: float = 0.3) -> DomainPair:
    """Gaussian class clusters at +-mean; target samples are rotated by a small orthogonal map."""
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal(dim)
    mean *= separation / np.sqrt(np.mean(mean ** 2))
    sx, sy = _clusters(rng, n_source, mean, noise)
    rot = small_rotation(dim, angle, rng)
    tx, ty = _clusters(rng, n_target + n_test, mean, noise)
    tx = tx @ rot.T
    return DomainPair(sx, sy, tx[:n_target], ty[:n_target], tx[n_target:], ty[n_target:])


def fixture_path(name: str):
    """Path of a bundled fixture (``source.csv.gz`` or ``target.csv.gz``)."""
    ref = resources.files("cryptotl") / "fixtures" / name
    if not ref.is_file():
        raise DataError(f"no bundled fixture named {name!r}")
    return ref


def load_fixture(name: str) -> tuple:
    with resources.as_file(fixture_path(name)) as p:
        return read_csv(p)


def subsample(x, y, fraction: float, seed: int) -> tuple:
    """Stratified subsample keeping at least one sample of each class."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    n = max(2, int(round(fraction * len(y))))
    idx0, idx1 = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
    n1 = min(len(idx1) - 0, max(1, int(round(n * len(idx1) / len(y)))))
    n0 = min(len(idx0), max(1, n - n1))
    take = np.concatenate([rng.choice(idx0, n0, replace=False), rng.choice(idx1, n1, replace=False)])
    take = rng.permutation(take)
    return np.asarray(x)[take], y[take]


FIXTURE_SEED = 0
FIXTURE_SIZES = {"source": 500, "target": 500, "test": 500}


def build_fixtures(out_dir, seed: int = FIXTURE_SEED):
    """Regenerate the bundled ``{source,target,test}.csv.gz`` files."""
    pair = make_domain_pair(seed, FIXTURE_SIZES["source"], FIXTURE_SIZES["target"],
                            FIXTURE_SIZES["test"])
    os.makedirs(out_dir, exist_ok=True)
    for name, x, y in (("source", pair.source_x, pair.source_y),
                       ("target", pair.target_x, pair.target_y),
                       ("test", pair.test_x, pair.test_y)):
        write_csv(os.path.join(out_dir, f"{name}.csv.gz"), x, y,
                  header=f"synthetic {name} domain, generator seed {seed}", precision=5)
