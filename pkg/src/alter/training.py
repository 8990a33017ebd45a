"""Cross-entropy training with Adam and a cosine schedule, plus metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .alga import encode_graph
from .checkpoint import save_checkpoint
from .graph import LabeledDataset, SplitIndices, split_dataset
from .model import AlterModel, ModelConfig
from .numerics import Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled_wd: bool = True
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.ratios = tuple(self.ratios)
        if self.lr < 0 or self.weight_decay < 0 or self.lr_min < 0:
            raise ValueError("lr, weight_decay and lr_min must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# ---------------------------------------------------------------------------
# loss, optimiser, schedule
# ---------------------------------------------------------------------------


def cross_entropy(probs, labels) -> Tensor:
    """Mean ``-log p[label]``; probabilities are clamped at 1e-12."""
    probs = nx.as_tensor(probs)
    sums = probs.data.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ValueError("probabilities must sum to 1")
    return nx.nll_from_probs(probs, labels)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float,
              weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, decoupled: bool = True) -> None:
    """One in-place Adam update using each parameter's ``grad``.

    Decoupled decay subtracts ``lr * weight_decay * theta`` after the Adam
    step; coupled decay adds ``weight_decay * theta`` to the gradient.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    for p in params:
        g = p.grad
        if g.shape != p.data.shape:
            raise ValueError(f"{p.name}: grad shape {g.shape} != value shape {p.data.shape}")
        if not decoupled and weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if decoupled and weight_decay:
            update = update + lr * weight_decay * p.data
        p.data = p.data - update


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc needs both classes present")
    # midranks handle ties
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[labels == 1].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class Metrics:
    acc: float
    auc: float
    sen: float
    spe: float
    f1: float
    confusion: tuple[int, int, int, int]  # tp, fp, tn, fn

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = 0.5) -> "Metrics":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        if scores.size == 0:
            raise ValueError("cannot evaluate an empty split")
        pred = scores >= threshold
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        tn = int(np.sum(~pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        try:
            auc = roc_auc(scores, labels)
        except ValueError:
            auc = float("nan")
        return cls(
            acc=(tp + tn) / scores.size,
            auc=auc,
            sen=_ratio(tp, tp + fn),
            spe=_ratio(tn, tn + fp),
            f1=_ratio(2 * tp, 2 * tp + fp + fn),
            confusion=(tp, fp, tn, fn),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = dict(zip(("tp", "fp", "tn", "fn"), self.confusion))
        if math.isnan(self.auc):
            d["auc"] = None
        return d


# ---------------------------------------------------------------------------
# data arrays and evaluation
# ---------------------------------------------------------------------------


@dataclass
class EncodedData:
    """Stacked model inputs for a dataset of equal-size graphs."""

    x: np.ndarray  # (S, N, N)
    e: np.ndarray  # (S, N, K)
    y: np.ndarray  # (S,)
    ids: list[str]

    def subset(self, idx: Sequence[int]) -> "EncodedData":
        idx = list(idx)
        return EncodedData(self.x[idx], self.e[idx], self.y[idx], [self.ids[i] for i in idx])

    def __len__(self) -> int:
        return len(self.y)


def encode_dataset(ds: LabeledDataset, k_hops: int, renormalize: bool = False) -> EncodedData:
    sizes = {g.n for g in ds.graphs}
    if len(sizes) != 1:
        raise ValueError(f"graphs must share one node count, got {sorted(sizes)}")
    x = np.stack([g.x for g in ds.graphs])
    e = np.stack([encode_graph(g, k_hops, renormalize) for g in ds.graphs])
    ids = ds.subject_ids or [str(i) for i in range(len(ds))]
    return EncodedData(x, e, np.asarray(ds.labels, dtype=np.int64), ids)


def predict_scores(model: AlterModel, data: EncodedData, batch_size: int = 64) -> np.ndarray:
    """Class-1 probability per graph."""
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.predict_proba(data.x[sl], data.e[sl])[:, 1])
    return np.concatenate(out) if out else np.empty(0)


def evaluate(model: AlterModel, data: EncodedData, threshold: float = 0.5) -> Metrics:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    return Metrics.from_scores(predict_scores(model, data), data.y, threshold)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    train_loss: list[float]
    val_metrics: list[dict]
    best_epoch: int
    best_val_auc: float | None
    best_checkpoint: str | None
    test_metrics: dict
    best_state: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "best_state"}
        return d


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, extra: dict | None = None) -> str:
    blob = json.dumps(
        {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "extra": extra or {}},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_loop(data: EncodedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
               run_dir: str | Path | None = None, split: SplitIndices | None = None,
               extra_meta: dict | None = None) -> RunRecord:
    """Train one model; keeps the parameters with the best validation AUC.

    With an empty validation split the final parameters are kept instead.

    The seed drives the split (unless given), the initialisation and the
    per-epoch shuffles. The learning rate follows the cosine schedule per
    epoch. With ``run_dir`` set, ``init.ckpt``, ``best.ckpt`` and
    ``final.ckpt`` are written there.
    """
    tc = train_cfg
    if split is None:
        split = split_dataset(len(data), tc.ratios, tc.seed)
    train, val, test = data.subset(split.train), data.subset(split.val), data.subset(split.test)
    if tc.batch_size > len(train):
        raise ValueError(f"batch_size {tc.batch_size} exceeds training set size {len(train)}")

    init_seq, shuffle_seq = np.random.SeedSequence(tc.seed).spawn(2)
    init_seed = int(init_seq.generate_state(1)[0])
    model = AlterModel(model_cfg, n_features=data.x.shape[-1], n_nodes=data.x.shape[-2], seed=init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    params = model.parameters()
    opt = AdamState()
    chash = config_hash(model_cfg, tc, extra_meta)
    meta = {"model": model_cfg.to_dict(), "train": asdict(tc), "config_hash": chash,
            "split": asdict(split), **(extra_meta or {})}

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_path / "init.ckpt", model.state_dict(), {**meta, "epoch": 0})

    losses: list[float] = []
    val_hist: list[dict] = []
    best_auc, best_epoch = -math.inf, 0
    best_state = model.state_dict()

    for epoch in range(tc.epochs):
        lr = cosine_lr(epoch, tc.epochs, tc.lr, tc.lr_min)
        order = shuffle_rng.permutation(len(train))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            model.zero_grad()
            logits, _ = model.forward(train.x[idx], train.e[idx])
            loss = nx.softmax_cross_entropy(logits, train.y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
            nx.backward(loss)
            adam_step(params, opt, lr, tc.weight_decay, (tc.beta1, tc.beta2), tc.eps, tc.decoupled_wd)
            epoch_loss += value * len(idx)
            seen += len(idx)
        losses.append(epoch_loss / seen)

        vm = evaluate(model, val) if len(val) else None
        val_hist.append(vm.to_dict() if vm else {})
        score = vm.auc if vm is not None and not math.isnan(vm.auc) else -math.inf
        # without a validation split the latest parameters are kept
        if score > best_auc or epoch == 0 or vm is None:
            best_auc, best_epoch = score, epoch + 1
            best_state = model.state_dict()
            if run_path is not None:
                save_checkpoint(run_path / "best.ckpt", best_state, {**meta, "epoch": best_epoch})
        log.debug("epoch %d loss %.4f val auc %s", epoch + 1, losses[-1], vm.auc if vm else None)

    if run_path is not None:
        save_checkpoint(run_path / "final.ckpt", model.state_dict(), {**meta, "epoch": tc.epochs})

    model.load_state_dict(best_state)
    test_m = evaluate(model, test).to_dict() if len(test) else {}
    return RunRecord(
        seed=tc.seed,
        config_hash=chash,
        train_loss=losses,
        val_metrics=val_hist,
        best_epoch=best_epoch,
        best_val_auc=None if math.isinf(best_auc) else best_auc,
        best_checkpoint=str(run_path / "best.ckpt") if run_path is not None else None,
        test_metrics=test_m,
        best_state=best_state,
    )


METRIC_NAMES = ("acc", "auc", "sen", "spe", "f1")


def summarize(records: Sequence[RunRecord]) -> dict:
    """Mean and (population) std of each test metric across runs, ordered by seed."""
    records = sorted(records, key=lambda r: r.seed)
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([r.test_metrics[name] for r in records
                         if r.test_metrics.get(name) is not None], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()) if vals.size else None,
                     "std": float(vals.std()) if vals.size else None}
    out["seeds"] = [r.seed for r in records]
    return out
