"""Synthetic brain-graph datasets with a planted long-range class signal.

ROIs sit on a ring and are cut into contiguous communities that share a
Gaussian latent. A few ROI pairs from distant communities are "planted":
in class 1 both ends of a pair also share a pair latent, in class 0 each
end gets its own private copy. Marginal variances match across classes, so
only the planted-pair correlations differ.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .graph import CSV_FMT, LabeledDataset, TimeSeriesTable, build_graph, write_manifest


def ring_distance(i: int, j: int, n: int) -> int:
    d = abs(i - j) % n
    return min(d, n - d)


def _default_pairs() -> list[tuple[int, int]]:
    return [(2, 22), (12, 32)]


@dataclass
class SynthConfig:
    n_rois: int = 40
    timepoints: int = 200
    subjects_per_class: int = 200
    n_communities: int = 8
    planted_pairs: list[tuple[int, int]] = field(default_factory=_default_pairs)
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 0.3
    seed: int = 0
    name: str = "synthetic-longrange"

    def __post_init__(self):
        self.planted_pairs = [tuple(int(v) for v in p) for p in self.planted_pairs]
        self.validate()

    @property
    def community_size(self) -> int:
        return self.n_rois // self.n_communities

    @property
    def min_ring_distance(self) -> int:
        return self.n_rois // 4

    def community_of(self, roi: int) -> int:
        return min(roi // self.community_size, self.n_communities - 1)

    def validate(self) -> None:
        if self.n_rois < 2 or self.timepoints < 2 or self.subjects_per_class < 1:
            raise ValueError("n_rois and timepoints must be >= 2, subjects_per_class >= 1")
        if not 1 <= self.n_communities <= self.n_rois:
            raise ValueError("n_communities must lie in [1, n_rois]")
        if min(self.alpha, self.beta, self.sigma) <= 0:
            raise ValueError("alpha, beta and sigma must be positive")
        seen = set()
        for pair in self.planted_pairs:
            if len(pair) != 2:
                raise ValueError(f"planted pair {pair} must have two ROIs")
            i, j = pair
            if not (0 <= i < self.n_rois and 0 <= j < self.n_rois) or i == j:
                raise ValueError(f"planted pair {pair} out of range or degenerate")
            key = frozenset(pair)
            if key in seen:
                raise ValueError(f"planted pair {pair} listed twice")
            seen.add(key)
            if ring_distance(i, j, self.n_rois) < self.min_ring_distance:
                raise ValueError(
                    f"planted pair {pair} has ring distance {ring_distance(i, j, self.n_rois)} "
                    f"< {self.min_ring_distance}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted_pairs"] = [list(p) for p in self.planted_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def expected_pair_correlation(cfg: SynthConfig, label: int) -> float:
    """Population correlation of a planted pair in different communities."""
    if label == 0:
        return 0.0
    return cfg.beta**2 / (cfg.alpha**2 + cfg.beta**2 + cfg.sigma**2)


def generate_subject(cfg: SynthConfig, class_label: int, seed: int,
                     subject_id: str = "") -> TimeSeriesTable:
    if class_label not in (0, 1):
        raise ValueError(f"class label must be 0 or 1, got {class_label}")
    cfg.validate()
    rng = np.random.default_rng(seed)
    t, n = cfg.timepoints, cfg.n_rois
    communities = rng.standard_normal((cfg.n_communities, t))
    series = cfg.alpha * communities[[cfg.community_of(i) for i in range(n)]].T
    for i, j in cfg.planted_pairs:
        shared = rng.standard_normal(t)
        private = rng.standard_normal((2, t))
        if class_label == 1:
            series[:, i] += cfg.beta * shared
            series[:, j] += cfg.beta * shared
        else:
            series[:, i] += cfg.beta * private[0]
            series[:, j] += cfg.beta * private[1]
    series += cfg.sigma * rng.standard_normal((t, n))
    return TimeSeriesTable(series, subject_id)


def subject_seed(cfg: SynthConfig, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])


def generate_series(cfg: SynthConfig) -> tuple[list[TimeSeriesTable], list[int]]:
    """Balanced subjects; labels alternate 0, 1, 0, 1, ..."""
    series, labels = [], []
    for idx in range(2 * cfg.subjects_per_class):
        label = idx % 2
        sid = f"sub-{idx:04d}"
        series.append(generate_subject(cfg, label, subject_seed(cfg, idx), sid))
        labels.append(label)
    return series, labels


def generate_dataset(cfg: SynthConfig, out_dir=None, threshold: float = 0.3) -> LabeledDataset:
    """Generate subjects and, with ``out_dir``, write them in the dataset-directory format."""
    series, labels = generate_series(cfg)
    if out_dir is not None:
        root = Path(out_dir)
        (root / "series").mkdir(parents=True, exist_ok=True)
        subjects = []
        for ts, label in zip(series, labels):
            rel = f"series/{ts.subject_id}.csv"
            np.savetxt(root / rel, ts.values, delimiter=",", fmt=CSV_FMT)
            subjects.append({"id": ts.subject_id, "timeseries": rel, "label": label})
        write_manifest(root, cfg.name, cfg.n_rois, subjects)
        (root / "synth_manifest.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    graphs = [build_graph(ts, threshold) for ts in series]
    return LabeledDataset(graphs, labels, cfg.name, series)
