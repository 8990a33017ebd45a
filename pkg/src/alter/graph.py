"""Brain graphs from ROI time series, dataset files and train/val/test splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.3
CSV_FMT = "%.17g"


class ZeroVarianceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TimeSeriesTable:
    """ROI time series: rows are timepoints, columns are ROIs."""

    values: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"time series must be 2-D, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError(f"need at least 2 timepoints, got {v.shape[0]}")
        if v.shape[1] < 2:
            raise ValueError(f"need at least 2 ROIs, got {v.shape[1]}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite entries in time series {self.subject_id!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_rois(self) -> int:
        return self.values.shape[1]

    @property
    def timepoints(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BrainGraph:
    x: np.ndarray
    a: np.ndarray
    labels: tuple[str, ...] | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class LabeledDataset:
    graphs: list[BrainGraph]
    labels: list[int]
    name: str = ""
    series: list[TimeSeriesTable] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.graphs) != len(self.labels):
            raise ValueError("graphs and labels differ in length")
        if any(y not in (0, 1) for y in self.labels):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def subject_ids(self) -> list[str]:
        return [ts.subject_id for ts in self.series]


@dataclass(frozen=True)
class SplitIndices:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int


def pearson_matrix(ts: TimeSeriesTable | np.ndarray) -> np.ndarray:
    """Pearson correlation between every pair of ROI columns.

    Columns with zero variance correlate 0 with everything else (a
    :class:`ZeroVarianceWarning` is emitted); the diagonal is always 1.
    """
    if not isinstance(ts, TimeSeriesTable):
        ts = TimeSeriesTable(np.asarray(ts))
    v = ts.values
    t = v.shape[0]
    centered = v - v.mean(axis=0)
    cov = centered.T @ centered / (t - 1)
    std = np.sqrt(np.diag(cov))
    flat = std <= 1e-12 * max(1.0, float(np.abs(v).max()))
    if flat.any():
        warnings.warn(
            f"{int(flat.sum())} zero-variance ROI(s) in {ts.subject_id or 'series'}; "
            "their correlations are set to 0",
            ZeroVarianceWarning,
            stacklevel=2,
        )
    safe = np.where(flat, 1.0, std)
    corr = cov / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def build_adjacency(corr: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binary adjacency: 1 where corr >= threshold off the diagonal."""
    corr = np.asarray(corr, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError(f"correlation matrix must be square, got {corr.shape}")
    if not np.all(np.isfinite(corr)):
        raise ValueError("correlation matrix has non-finite entries")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("correlation matrix must be symmetric")
    a = (corr >= threshold).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return a


def build_graph(ts: TimeSeriesTable, threshold: float = DEFAULT_THRESHOLD,
                labels: Sequence[str] | None = None) -> BrainGraph:
    x = pearson_matrix(ts)
    return BrainGraph(x=x, a=build_adjacency(x, threshold),
                      labels=tuple(labels) if labels is not None else None)


def split_dataset(ds_or_size, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> SplitIndices:
    """Shuffle indices with ``seed`` and cut into train/val/test.

    Val and test get ``floor(ratio * n)`` items; the remainder goes to train.
    """
    n = ds_or_size if isinstance(ds_or_size, int) else len(ds_or_size)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three values summing to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ValueError("split ratios must be non-negative")
    if n < 10:
        raise ValueError(f"dataset too small to split: {n} < 10")
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n).tolist()
    return SplitIndices(
        train=perm[:n_train],
        val=perm[n_train : n_train + n_val],
        test=perm[n_train + n_val :],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_series_csv(path, subject_id: str = "") -> TimeSeriesTable:
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return TimeSeriesTable(values, subject_id)


def write_matrix_csv(path, m: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(m), delimiter=",", fmt=CSV_FMT)


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(root) -> dict:
    root = Path(root)
    manifest = json.loads((root / "dataset.json").read_text())
    for key in ("name", "num_rois", "subjects"):
        if key not in manifest:
            raise ValueError(f"{root / 'dataset.json'}: missing key {key!r}")
    return manifest


def write_manifest(root, name: str, num_rois: int, subjects: list[dict]) -> None:
    payload = {"name": name, "num_rois": num_rois, "subjects": subjects}
    Path(root, "dataset.json").write_text(json.dumps(payload, indent=2) + "\n")


def load_dataset(root, threshold: float = DEFAULT_THRESHOLD) -> LabeledDataset:
    """Load every subject listed in ``dataset.json`` and build its graph."""
    root = Path(root)
    manifest = read_manifest(root)
    graphs, labels, series = [], [], []
    for subj in manifest["subjects"]:
        ts = read_series_csv(root / subj["timeseries"], str(subj["id"]))
        if ts.n_rois != manifest["num_rois"]:
            raise ValueError(f"subject {subj['id']}: {ts.n_rois} ROIs, manifest says {manifest['num_rois']}")
        series.append(ts)
        graphs.append(build_graph(ts, threshold))
        labels.append(int(subj["label"]))
    return LabeledDataset(graphs, labels, manifest["name"], series)


def write_graph_cache(out_dir, g: BrainGraph, threshold: float, source_hash: str) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out_dir / "X.csv", g.x)
    write_matrix_csv(out_dir / "A.csv", g.a)
    manifest = {"threshold": threshold, "source_sha256": source_hash, "num_rois": g.n}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_graph_cache(cache_dir) -> BrainGraph:
    cache_dir = Path(cache_dir)
    return BrainGraph(x=read_matrix_csv(cache_dir / "X.csv"), a=read_matrix_csv(cache_dir / "A.csv"))
