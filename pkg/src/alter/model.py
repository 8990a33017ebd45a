"""Walk-embedding transformer for graph classification.

Long-range embeddings are remapped by a linear layer, concatenated to the
node features, projected to ``d_model`` and passed through an L-layer,
M-head self-attention encoder. A readout pools node states into one graph
vector and a two-layer MLP produces class probabilities.

All ops accept a leading batch axis: ``x`` is (B, N, d) and ``e`` is
(B, N, K). Single-graph helpers add and strip that axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .graph import BrainGraph
from .numerics import Parameter, Tensor

READOUTS = ("mean", "max", "sum", "sort", "clustering")
ENCODERS = ("prenorm", "bare")


@dataclass
class ModelConfig:
    k_hops: int = 16
    k_prime: int = 32
    d_model: int = 128
    layers: int = 2
    heads: int = 4
    readout: str = "clustering"
    sort_keep: int | None = None
    clusters: int = 10
    classes: int = 2
    ffn_mult: int = 2
    mlp_hidden: int | None = None
    encoder: str = "prenorm"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("k_hops", "d_model", "layers", "heads", "clusters", "classes", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k_prime < 0:
            raise ValueError("k_prime must be >= 0")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}; choose from {READOUTS}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; choose from {ENCODERS}")
        if self.sort_keep is not None and self.sort_keep < 1:
            raise ValueError("sort_keep must be >= 1")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionRecord:
    """Post-softmax attention, one array per layer shaped (..., heads, N, N)."""

    layers: list[np.ndarray]

    def graph(self, b: int) -> "AttentionRecord":
        return AttentionRecord([layer[b] for layer in self.layers])


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _orthonormal_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Gram-Schmidt on a Gaussian matrix; rows beyond ``cols`` stay random unit vectors."""
    m = rng.standard_normal((rows, cols))
    out = np.empty_like(m)
    for i in range(rows):
        v = m[i].copy()
        for j in range(min(i, cols)):
            v -= (out[j] @ v) * out[j]
        norm = np.linalg.norm(v)
        out[i] = v / norm if norm > 1e-12 else m[i] / np.linalg.norm(m[i])
    return out


class AlterModel:
    """Parameters plus a batched forward pass.

    ``n_features`` is the node-feature width d (equal to N for correlation
    profiles); ``n_nodes`` fixes the sort-readout width.
    """

    def __init__(self, config: ModelConfig, n_features: int, n_nodes: int, seed: int = 0):
        self.config = config
        self.n_features = n_features
        self.n_nodes = n_nodes
        self.sort_keep = config.sort_keep if config.sort_keep is not None else math.ceil(n_nodes / 2)
        if config.readout == "sort" and self.sort_keep > n_nodes:
            raise ValueError(f"sort_keep={self.sort_keep} exceeds node count {n_nodes}")
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model

        if c.k_prime > 0:
            self._add("inject.w", _xavier(rng, c.k_prime, c.k_hops))
            self._add("inject.b", np.zeros(c.k_prime))
        self._add("in_proj.w", _xavier(rng, d, n_features + c.k_prime))
        self._add("in_proj.b", np.zeros(d))
        for li in range(c.layers):
            p = f"layer{li}."
            if c.encoder == "prenorm":
                self._add(p + "ln1.g", np.ones(d))
                self._add(p + "ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + w, _xavier(rng, d, d))
            if c.encoder == "prenorm":
                hidden = c.ffn_mult * d
                self._add(p + "ln2.g", np.ones(d))
                self._add(p + "ln2.b", np.zeros(d))
                self._add(p + "ff1.w", _xavier(rng, hidden, d))
                self._add(p + "ff1.b", np.zeros(hidden))
                self._add(p + "ff2.w", _xavier(rng, d, hidden))
                self._add(p + "ff2.b", np.zeros(d))
        if c.encoder == "prenorm":
            self._add("final_ln.g", np.ones(d))
            self._add("final_ln.b", np.zeros(d))
        if c.readout == "clustering":
            self._add("readout.centers", _orthonormal_rows(rng, c.clusters, d))
        mlp_hidden = c.mlp_hidden or d
        self._add("head.fc1.w", _xavier(rng, mlp_hidden, self.readout_dim))
        self._add("head.fc1.b", np.zeros(mlp_hidden))
        self._add("head.fc2.w", _xavier(rng, c.classes, mlp_hidden))
        self._add("head.fc2.b", np.zeros(c.classes))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(value, name)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    @property
    def readout_dim(self) -> int:
        c = self.config
        if c.readout == "sort":
            return self.sort_keep * c.d_model
        if c.readout == "clustering":
            return c.clusters * c.d_model
        return c.d_model

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            p.data = np.asarray(state[name], dtype=np.float64).reshape(p.shape).copy()

    def forward(self, x, e) -> tuple[Tensor, AttentionRecord]:
        """Batched logits (B, classes) and the attention record."""
        x = np.asarray(x, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        if self.config.k_prime > 0:
            tokens = build_tokens(x, inject_embedding(e, self))
        else:
            tokens = nx.as_tensor(x)
        z, record = encoder_forward(tokens, self)
        logits = head_logits(readout(z, self), self)
        return logits, record

    def predict_proba(self, x, e) -> np.ndarray:
        logits, _ = self.forward(x, e)
        return nx.softmax_rows(logits).data


def inject_embedding(e, model: AlterModel) -> Tensor:
    """Trainable remap of the K-step embedding to k' columns."""
    e = nx.as_tensor(e)
    if model.config.k_prime == 0:
        raise ValueError("model was built without embedding injection (k_prime=0)")
    if e.shape[-1] != model.config.k_hops:
        raise ValueError(f"embedding has {e.shape[-1]} columns, model expects {model.config.k_hops}")
    return nx.linear(e, model["inject.w"], model["inject.b"])


def build_tokens(x, e_hat) -> Tensor:
    """Concatenate node features and injected embeddings column-wise."""
    x, e_hat = nx.as_tensor(x), nx.as_tensor(e_hat)
    if x.shape[:-1] != e_hat.shape[:-1]:
        raise ValueError(f"row mismatch: features {x.shape} vs embedding {e_hat.shape}")
    return nx.concat_cols([x, e_hat])


def _attention(h: Tensor, model: AlterModel, prefix: str) -> tuple[Tensor, np.ndarray]:
    c = model.config
    *lead, n, d = h.shape
    dh = d // c.heads

    def heads(t: Tensor) -> Tensor:
        # (..., N, d) -> (..., M, N, dh)
        t = nx.reshape(t, (*lead, n, c.heads, dh))
        nd = t.ndim
        return nx.transpose(t, (*range(nd - 3), nd - 2, nd - 3, nd - 1))

    q = heads(nx.linear(h, model[prefix + "wq"]))
    k = heads(nx.linear(h, model[prefix + "wk"]))
    v = heads(nx.linear(h, model[prefix + "wv"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dh))
    attn = nx.softmax_rows(scores)
    z = nx.matmul(attn, v)
    nd = z.ndim
    z = nx.transpose(z, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    z = nx.reshape(z, (*lead, n, d))
    return nx.linear(z, model[prefix + "wo"]), attn.data


def encoder_forward(tokens, model: AlterModel) -> tuple[Tensor, AttentionRecord]:
    """Input projection followed by the attention layers."""
    c = model.config
    tokens = nx.as_tensor(tokens)
    if not np.all(np.isfinite(tokens.data)):
        raise nx.NonFiniteError("non-finite tokens")
    h = nx.linear(tokens, model["in_proj.w"], model["in_proj.b"])
    maps = []
    for li in range(c.layers):
        p = f"layer{li}."
        if c.encoder == "bare":
            h, attn = _attention(h, model, p)
        else:
            a, attn = _attention(nx.layer_norm(h, model[p + "ln1.g"], model[p + "ln1.b"], c.ln_eps), model, p)
            h = nx.add(h, a)
            f = nx.layer_norm(h, model[p + "ln2.g"], model[p + "ln2.b"], c.ln_eps)
            f = nx.linear(nx.relu(nx.linear(f, model[p + "ff1.w"], model[p + "ff1.b"])),
                          model[p + "ff2.w"], model[p + "ff2.b"])
            h = nx.add(h, f)
        maps.append(attn)
    if c.encoder == "prenorm":
        h = nx.layer_norm(h, model["final_ln.g"], model["final_ln.b"], c.ln_eps)
    return h, AttentionRecord(maps)


def readout(z: Tensor, model: AlterModel, kind: str | None = None) -> Tensor:
    """Pool node states (..., N, d) into one vector per graph."""
    kind = kind or model.config.readout
    if kind == "mean":
        return nx.mean_axis(z, -2)
    if kind == "sum":
        return nx.sum_axis(z, -2)
    if kind == "max":
        return nx.max_axis(z, -2)
    if kind == "sort":
        keep = model.sort_keep
        n = z.shape[-2]
        if keep > n:
            raise ValueError(f"sort_keep={keep} exceeds node count {n}")
        order = np.argsort(-z.data[..., -1], axis=-1, kind="stable")[..., :keep]
        picked = nx.gather_rows(z, order)
        return nx.reshape(picked, (*z.shape[:-2], keep * z.shape[-1]))
    if kind == "clustering":
        centers = model["readout.centers"]
        assign = nx.softmax_rows(nx.matmul(z, nx.transpose(centers)))
        pooled = nx.matmul(nx.transpose(assign), z)
        return nx.reshape(pooled, (*z.shape[:-2], pooled.shape[-2] * pooled.shape[-1]))
    raise ValueError(f"unknown readout {kind!r}")


def head_logits(h: Tensor, model: AlterModel) -> Tensor:
    if not np.all(np.isfinite(h.data)):
        raise nx.NonFiniteError("non-finite graph vector")
    hidden = nx.relu(nx.linear(h, model["head.fc1.w"], model["head.fc1.b"]))
    return nx.linear(hidden, model["head.fc2.w"], model["head.fc2.b"])


def classify(h, model: AlterModel) -> Tensor:
    """Class probabilities from a pooled graph vector."""
    return nx.softmax_rows(head_logits(nx.as_tensor(h), model))


def forward(g: BrainGraph, e: np.ndarray, model: AlterModel) -> tuple[Tensor, AttentionRecord]:
    """Logits (classes,) and attention (heads, N, N per layer) for one graph."""
    logits, record = model.forward(g.x[None], np.asarray(e)[None])
    return nx.reshape(logits, (logits.shape[-1],)), record.graph(0)


def export_attention(record: AttentionRecord, reduction: str = "mean",
                     layer: int = -1, head: int | None = None) -> np.ndarray:
    """One N x N map from a single graph's record.

    ``head`` selects a single head; otherwise heads are reduced by ``mean``
    or ``max``.
    """
    if not record.layers:
        raise ValueError("empty attention record")
    maps = record.layers[layer]
    if maps.ndim != 3:
        raise ValueError(f"expected (heads, N, N) maps, got {maps.shape}; select a graph first")
    if head is not None:
        return maps[head].copy()
    if reduction == "mean":
        return maps.mean(axis=0)
    if reduction == "max":
        return maps.max(axis=0)
    raise ValueError(f"unknown reduction {reduction!r}")
