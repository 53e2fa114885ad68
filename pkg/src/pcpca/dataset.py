"""Data containers and ingestion: centered matrices, observation masks,
foreground/background pairs, CSV loading, and random cell masking.

Unobserved cells are tracked by a boolean mask and hold NaN in ``values``
so that accidental arithmetic on them is loud rather than silently wrong.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import CsvParseError


@dataclass(frozen=True)
class DataMatrix:
    """A samples-by-features matrix with an observation mask.

    ``feature_mean`` is the per-column mean subtracted at centering time
    (zeros for raw data), so ``values + feature_mean`` recovers the raw
    observed cells.
    """

    values: np.ndarray
    mask: np.ndarray = None
    centered: bool = False
    feature_mean: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = self.mask
        if mask is None:
            mask = np.ones(values.shape, dtype=bool)
        mask = np.array(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError(
                f"mask shape {mask.shape} != values shape {values.shape}"
            )
        if values.ndim != 2:
            raise ValueError("values must be 2-d (samples x features)")
        # NaN sentinel on unobserved cells; observed cells must be finite.
        values = np.where(mask, values, np.nan)
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("observed cells contain non-finite values")
        feature_mean = self.feature_mean
        if feature_mean is None:
            feature_mean = np.zeros(values.shape[1])
        feature_mean = np.array(feature_mean, dtype=float)
        if feature_mean.shape != (values.shape[1],):
            raise ValueError("feature_mean must have one entry per feature")
        if self.centered:
            counts = mask.sum(axis=0)
            sums = np.where(mask, values, 0.0).sum(axis=0)
            means = np.divide(sums, counts, out=np.zeros_like(sums),
                              where=counts > 0)
            if np.max(np.abs(means), initial=0.0) > 1e-9:
                raise ValueError("centered flag set but column means exceed 1e-9")
        for arr in (values, mask, feature_mean):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "feature_mean", feature_mean)

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    @property
    def fully_observed(self):
        return bool(self.mask.all())

    def observed_values(self):
        """Values with unobserved cells replaced by 0 (safe for sums)."""
        return np.where(self.mask, self.values, 0.0)


@dataclass(frozen=True)
class ObservationMask:
    """Per-sample observed/unobserved feature index lists.

    Index lists are strictly increasing, partition ``range(n_features)``,
    and define the row-selection indicator matrices used by the
    missing-data objective.
    """

    observed: tuple
    unobserved: tuple
    n_features: int

    @classmethod
    def from_bool_matrix(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        obs = tuple(np.flatnonzero(row) for row in mask)
        unobs = tuple(np.flatnonzero(~row) for row in mask)
        return cls(observed=obs, unobserved=unobs, n_features=mask.shape[1])

    def __len__(self):
        return len(self.observed)

    def indicator(self, i):
        """Materialize the observed-row selector L_i (D_i x D, 0/1)."""
        idx = self.observed[i]
        L = np.zeros((len(idx), self.n_features))
        L[np.arange(len(idx)), idx] = 1.0
        return L

    def indicator_unobserved(self, i):
        """Materialize the unobserved-row selector P_i (U_i x D, 0/1)."""
        idx = self.unobserved[i]
        P = np.zeros((len(idx), self.n_features))
        P[np.arange(len(idx)), idx] = 1.0
        return P


@dataclass(frozen=True)
class ContrastivePair:
    """Foreground and background data sharing a feature space."""

    foreground: DataMatrix
    background: DataMatrix

    def __post_init__(self):
        if self.foreground.n_features != self.background.n_features:
            raise ValueError("foreground and background must share feature count")
        if self.foreground.n_samples < 1 or self.background.n_samples < 1:
            raise ValueError("both groups need at least one sample")

    @property
    def n(self):
        return self.foreground.n_samples

    @property
    def m(self):
        return self.background.n_samples

    @property
    def n_features(self):
        return self.foreground.n_features

    @property
    def centered(self):
        return self.foreground.centered and self.background.centered


def load_csv(path, missing_token="", header=False):
    """Load a samples-by-features CSV into an uncentered DataMatrix.

    Cells equal to ``missing_token`` (after stripping whitespace) are
    marked unobserved. Ragged rows and non-numeric observed cells raise
    :class:`CsvParseError` with 1-based coordinates.
    """
    rows = []
    mask_rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, record in enumerate(reader, start=1):
            if header and lineno == 1:
                width = len(record)
                continue
            row_index = lineno - 1 if header else lineno
            if not record:
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise CsvParseError(
                    f"row {row_index} has {len(record)} cells, expected {width}",
                    row=row_index,
                )
            vals = np.empty(len(record))
            obs = np.empty(len(record), dtype=bool)
            for j, cell in enumerate(record):
                text = cell.strip()
                if text == missing_token:
                    vals[j] = np.nan
                    obs[j] = False
                    continue
                try:
                    vals[j] = float(text)
                except ValueError:
                    raise CsvParseError(
                        f"non-numeric cell {text!r} at ({row_index}, {j + 1})",
                        row=row_index, col=j + 1,
                    ) from None
                obs[j] = True
            rows.append(vals)
            mask_rows.append(obs)
    if not rows:
        raise CsvParseError("no data rows found")
    return DataMatrix(values=np.array(rows), mask=np.array(mask_rows))


def save_csv(data, path, missing_token=""):
    """Write a DataMatrix back to CSV, unobserved cells as ``missing_token``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for vals, obs in zip(data.values, data.mask):
            writer.writerow(
                [repr(float(v)) if o else missing_token for v, o in zip(vals, obs)]
            )


def save_mask_csv(data, path):
    """Write the observation mask as a parallel 0/1 CSV."""
    np.savetxt(path, data.mask.astype(int), fmt="%d", delimiter=",")


def load_mask_csv(path):
    """Read a 0/1 CSV written by :func:`save_mask_csv`."""
    return np.loadtxt(path, delimiter=",", ndmin=2).astype(bool)


def center(data):
    """Subtract per-column means computed over observed cells.

    The subtracted vector accumulates into ``feature_mean`` so that raw
    data remain recoverable; centering twice is a no-op up to 1e-9.
    """
    counts = data.mask.sum(axis=0)
    if np.any(counts == 0):
        col = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"column {col + 1} has no observed cells; cannot center")
    sums = data.observed_values().sum(axis=0)
    means = sums / counts
    values = np.where(data.mask, data.values - means, np.nan)
    return DataMatrix(
        values=values,
        mask=data.mask,
        centered=True,
        feature_mean=data.feature_mean + means,
    )


def mask_at_random(data, p, seed):
    """Flip each observed cell to unobserved independently with probability p."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    drop = rng.random(data.values.shape) < p
    mask = data.mask & ~drop
    return DataMatrix(
        values=np.where(mask, data.values, np.nan),
        mask=mask,
        centered=False,
        feature_mean=data.feature_mean,
    )


def make_pair(foreground, background, do_center=True):
    """Bundle (and by default center) two matrices into a ContrastivePair."""
    if do_center:
        foreground = center(foreground)
        background = center(background)
    return ContrastivePair(foreground=foreground, background=background)
