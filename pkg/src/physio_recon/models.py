"""The two windowed transformer architectures.

seq2one embeds each sliding window (size 32, step 1), runs one encoder layer,
and projects the mid-window representation to a single output sample, so the
prediction at index k corresponds to input time k + window/2. seq2seq stacks
five blocks with growing windows (4..20, step = window/4); each block runs the
encoder layer per window and averages overlapping per-position features back
to the full sequence length, so the output has the input's length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from physio_recon import autodiff as ad
from physio_recon.autodiff import Tensor
from physio_recon.errors import ShapeError

# 400 cortical + 25 subcortical + 72 white-matter ROIs
DEFAULT_N_ROI = 497


@dataclass(frozen=True)
class WindowSpec:
    window: int
    step: int

    def __post_init__(self):
        if not 1 <= self.step <= self.window:
            raise ShapeError(f"WindowSpec: need 1 <= step <= window, got {self}")


@dataclass(frozen=True)
class AttentionConfig:
    """Multi-head attention dimensions: inner size is n_heads * head_dim."""

    n_heads: int
    head_dim: int
    model_dim: int
    dropout: float = 0.3

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.head_dim

    def __post_init__(self):
        if min(self.n_heads, self.head_dim, self.model_dim) < 1:
            raise ShapeError(f"AttentionConfig: dimensions must be positive, got {self}")
        if not 0 <= self.dropout < 1:
            raise ShapeError(f"AttentionConfig: dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class Seq2OneConfig:
    n_roi: int = DEFAULT_N_ROI
    window: int = 32
    n_layers: int = 1
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(8, 60, 480))
    ffn_expansion: float = 1.0
    n_outputs: int = 1
    use_positional: bool = True
    use_ffn: bool = True

    def __post_init__(self):
        if self.window % 2 != 0:
            raise ShapeError(f"Seq2OneConfig: window must be even, got {self.window}")
        if self.n_layers != 1:
            raise ShapeError("Seq2OneConfig: a single encoder layer is the supported depth")
        if self.n_outputs not in (1, 2):
            raise ShapeError(f"Seq2OneConfig: n_outputs must be 1 or 2, got {self.n_outputs}")

    @property
    def midpoint(self) -> int:
        return self.window // 2

    def to_dict(self) -> dict:
        return {
            "arch": "seq2one",
            "n_roi": self.n_roi,
            "window": self.window,
            "n_heads": self.attention.n_heads,
            "head_dim": self.attention.head_dim,
            "model_dim": self.attention.model_dim,
            "dropout": self.attention.dropout,
            "ffn_expansion": self.ffn_expansion,
            "n_outputs": self.n_outputs,
            "use_positional": self.use_positional,
            "use_ffn": self.use_ffn,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2OneConfig":
        return cls(
            n_roi=int(d["n_roi"]),
            window=int(d.get("window", 32)),
            attention=AttentionConfig(
                int(d.get("n_heads", 8)),
                int(d.get("head_dim", 60)),
                int(d.get("model_dim", 480)),
                float(d.get("dropout", 0.3)),
            ),
            ffn_expansion=float(d.get("ffn_expansion", 1.0)),
            n_outputs=int(d.get("n_outputs", 1)),
            use_positional=bool(d.get("use_positional", True)),
            use_ffn=bool(d.get("use_ffn", True)),
        )


@dataclass(frozen=True)
class Seq2SeqConfig:
    n_roi: int = DEFAULT_N_ROI
    block_windows: tuple[int, ...] = (4, 8, 12, 16, 20)
    feature_dim: int = 500
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(20, 100, 500))
    n_outputs: int = 1
    use_positional: bool = True
    use_ffn: bool = False
    ffn_expansion: float = 1.0

    def __post_init__(self):
        if not self.block_windows:
            raise ShapeError("Seq2SeqConfig: need at least one block window")
        if self.attention.model_dim != self.feature_dim:
            raise ShapeError(
                f"Seq2SeqConfig: attention.model_dim {self.attention.model_dim} "
                f"must equal feature_dim {self.feature_dim}"
            )

    def block_step(self, window: int) -> int:
        return max(1, window // 4)

    @property
    def max_window(self) -> int:
        return max(self.block_windows)

    def to_dict(self) -> dict:
        return {
            "arch": "seq2seq",
            "n_roi": self.n_roi,
            "block_windows": list(self.block_windows),
            "feature_dim": self.feature_dim,
            "n_heads": self.attention.n_heads,
            "head_dim": self.attention.head_dim,
            "dropout": self.attention.dropout,
            "n_outputs": self.n_outputs,
            "use_positional": self.use_positional,
            "use_ffn": self.use_ffn,
            "ffn_expansion": self.ffn_expansion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2SeqConfig":
        feature_dim = int(d.get("feature_dim", 500))
        return cls(
            n_roi=int(d["n_roi"]),
            block_windows=tuple(int(w) for w in d.get("block_windows", (4, 8, 12, 16, 20))),
            feature_dim=feature_dim,
            attention=AttentionConfig(
                int(d.get("n_heads", 20)),
                int(d.get("head_dim", 100)),
                feature_dim,
                float(d.get("dropout", 0.3)),
            ),
            n_outputs=int(d.get("n_outputs", 1)),
            use_positional=bool(d.get("use_positional", True)),
            use_ffn=bool(d.get("use_ffn", False)),
            ffn_expansion=float(d.get("ffn_expansion", 1.0)),
        )


def config_from_dict(d: dict):
    arch = d.get("arch")
    if arch == "seq2one":
        return Seq2OneConfig.from_dict(d)
    if arch == "seq2seq":
        return Seq2SeqConfig.from_dict(d)
    raise ShapeError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# windowing


def slide_windows(length: int, spec: WindowSpec) -> np.ndarray:
    """Start indices of sliding windows over [0, length).

    Starts advance by `step`; when (length - window) is not a multiple of the
    step, a final window clamped to end at `length` is appended so every
    position is covered.
    """
    if length < spec.window:
        raise ShapeError(f"slide_windows: length {length} < window {spec.window}")
    last = length - spec.window
    starts = list(range(0, last + 1, spec.step))
    if starts[-1] != last:
        starts.append(last)
    return np.asarray(starts, dtype=np.int64)


def sinusoidal_positions(window: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos positional table of shape (window, dim)."""
    pos = np.arange(window, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def _init_encoder_params(params, prefix, rng, model_dim, inner, use_ffn, ffn_expansion, dtype):
    def add_linear(name, fan_in, fan_out):
        params[f"{prefix}.{name}.W"] = Tensor(_glorot(rng, fan_in, fan_out, dtype), requires_grad=True)
        params[f"{prefix}.{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    params[f"{prefix}.ln1.g"] = Tensor(np.ones(model_dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}.ln1.b"] = Tensor(np.zeros(model_dim, dtype=dtype), requires_grad=True)
    add_linear("q", model_dim, inner)
    add_linear("k", model_dim, inner)
    add_linear("v", model_dim, inner)
    add_linear("o", inner, model_dim)
    if use_ffn:
        hidden = max(1, round(model_dim * ffn_expansion))
        params[f"{prefix}.ln2.g"] = Tensor(np.ones(model_dim, dtype=dtype), requires_grad=True)
        params[f"{prefix}.ln2.b"] = Tensor(np.zeros(model_dim, dtype=dtype), requires_grad=True)
        add_linear("f1", model_dim, hidden)
        add_linear("f2", hidden, model_dim)


def init_params(cfg, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Initialize all learned tensors for either architecture."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    params: dict[str, Tensor] = {}
    if isinstance(cfg, Seq2OneConfig):
        dims = [("enc", cfg.attention.model_dim)]
        feature = cfg.attention.model_dim
    else:
        dims = [(f"b{i}", cfg.feature_dim) for i in range(len(cfg.block_windows))]
        feature = cfg.feature_dim
    params["embed.W"] = Tensor(_glorot(rng, cfg.n_roi, feature, dtype), requires_grad=True)
    params["embed.b"] = Tensor(np.zeros(feature, dtype=dtype), requires_grad=True)
    for prefix, model_dim in dims:
        _init_encoder_params(
            params, prefix, rng, model_dim, cfg.attention.inner_dim, cfg.use_ffn, cfg.ffn_expansion, dtype
        )
    params["head.W"] = Tensor(_glorot(rng, feature, cfg.n_outputs, dtype), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(cfg.n_outputs, dtype=dtype), requires_grad=True)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    """Total scalar count across all parameter tensors."""
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# forward passes


def encoder_layer(x: Tensor, params: dict, prefix: str, cfg: AttentionConfig,
                  use_ffn: bool, ffn_expansion: float, train: bool,
                  rng: np.random.Generator | None) -> Tensor:
    """Pre-norm residual encoder layer on a (batch, window, model_dim) tensor.

    The attention sublayer projects to n_heads * head_dim, applies per-head
    scaled dot-product attention (scale 1/sqrt(head_dim)), concatenates heads,
    and projects back; dropout acts on the attention weights and on the FFN
    output when training.
    """
    if x.ndim != 3 or x.shape[-1] != cfg.model_dim:
        raise ShapeError(
            f"encoder_layer: expected (batch, window, {cfg.model_dim}), got {x.shape}"
        )
    p = lambda name: params[f"{prefix}.{name}"]
    batch, window, _ = x.shape

    h = ad.layer_norm(x, p("ln1.g"), p("ln1.b"))
    heads_shape = (batch, window, cfg.n_heads, cfg.head_dim)
    q = ad.transpose(ad.reshape(ad.linear(h, p("q.W"), p("q.b")), heads_shape), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(ad.linear(h, p("k.W"), p("k.b")), heads_shape), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(ad.linear(h, p("v.W"), p("v.b")), heads_shape), (0, 2, 1, 3))

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    attn = ad.softmax(scores, axis=-1, scale=1.0 / math.sqrt(cfg.head_dim))
    attn = ad.dropout(attn, cfg.dropout, train, rng)
    ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (batch, window, cfg.inner_dim))
    x = ad.add(x, ad.linear(ctx, p("o.W"), p("o.b")))

    if use_ffn:
        h2 = ad.layer_norm(x, p("ln2.g"), p("ln2.b"))
        f = ad.linear(ad.relu(ad.linear(h2, p("f1.W"), p("f1.b"))), p("f2.W"), p("f2.b"))
        f = ad.dropout(f, cfg.dropout, train, rng)
        x = ad.add(x, f)
    return x


def _as_tensor(roi, dtype) -> Tensor:
    if isinstance(roi, Tensor):
        return roi
    return Tensor(np.asarray(roi, dtype=dtype))


def seq2one_forward(roi, params: dict, cfg: Seq2OneConfig, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Predict one sample per sliding window midpoint; output (T - W + 1, n_outputs)."""
    dtype = params["embed.W"].dtype
    x = _as_tensor(roi, dtype)
    if x.ndim != 2 or x.shape[1] != cfg.n_roi:
        raise ShapeError(f"seq2one_forward: expected (T, {cfg.n_roi}), got {x.shape}")
    t_len = x.shape[0]
    if t_len < cfg.window:
        raise ShapeError(f"seq2one_forward: T={t_len} shorter than window {cfg.window}")
    starts = slide_windows(t_len, WindowSpec(cfg.window, 1))
    # embedding is per time point, so embed once and gather the embedded rows
    e = ad.gather_windows(ad.linear(x, params["embed.W"], params["embed.b"]), starts, cfg.window)
    if cfg.use_positional:
        pe = sinusoidal_positions(cfg.window, cfg.attention.model_dim, dtype)
        e = ad.add(e, Tensor(pe))
    e = encoder_layer(e, params, "enc", cfg.attention, cfg.use_ffn, cfg.ffn_expansion, train, rng)
    mid = ad.select_index(e, 1, cfg.midpoint)
    return ad.linear(mid, params["head.W"], params["head.b"])


def seq2seq_block(x: Tensor, window: int, params: dict, prefix: str, cfg: Seq2SeqConfig,
                  train: bool, rng: np.random.Generator | None) -> Tensor:
    """One fused-window block: window, encode, overlap-average back to full length."""
    t_len = x.shape[0]
    if t_len < window:
        raise ShapeError(f"seq2seq_block: T={t_len} shorter than window {window}")
    starts = slide_windows(t_len, WindowSpec(window, cfg.block_step(window)))
    w = ad.gather_windows(x, starts, window)
    if cfg.use_positional:
        pe = sinusoidal_positions(window, cfg.feature_dim, x.dtype)
        w = ad.add(w, Tensor(pe))
    w = encoder_layer(w, params, prefix, cfg.attention, cfg.use_ffn, cfg.ffn_expansion, train, rng)
    return ad.overlap_mean(w, starts, t_len)


def seq2seq_forward(roi, params: dict, cfg: Seq2SeqConfig, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Full-length prediction through the stacked blocks; output (T, n_outputs)."""
    dtype = params["embed.W"].dtype
    x = _as_tensor(roi, dtype)
    if x.ndim != 2 or x.shape[1] != cfg.n_roi:
        raise ShapeError(f"seq2seq_forward: expected (T, {cfg.n_roi}), got {x.shape}")
    if x.shape[0] < cfg.max_window:
        raise ShapeError(
            f"seq2seq_forward: T={x.shape[0]} shorter than largest window {cfg.max_window}"
        )
    h = ad.linear(x, params["embed.W"], params["embed.b"])
    for i, window in enumerate(cfg.block_windows):
        h = seq2seq_block(h, window, params, f"b{i}", cfg, train, rng)
    return ad.linear(h, params["head.W"], params["head.b"])


def overlap_average(window_features, length: int) -> Tensor:
    """Average per-position features over a list of (start, Tensor(window, dim)) pairs."""
    if not window_features:
        raise ShapeError("overlap_average: no windows given")
    starts = np.array([s for s, _ in window_features], dtype=np.int64)
    feats = ad.concat([ad.reshape(f, (1,) + tuple(f.shape)) for _, f in window_features], axis=0)
    return ad.overlap_mean(feats, starts, length)


# ---------------------------------------------------------------------------
# model handle


@dataclass
class Model:
    """A configured architecture plus its parameter tensors."""

    cfg: Seq2OneConfig | Seq2SeqConfig
    params: dict[str, Tensor]

    @property
    def arch(self) -> str:
        return "seq2one" if isinstance(self.cfg, Seq2OneConfig) else "seq2seq"

    @classmethod
    def init(cls, cfg, seed: int, dtype=np.float32) -> "Model":
        return cls(cfg=cfg, params=init_params(cfg, seed, dtype))

    def forward(self, roi, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if isinstance(self.cfg, Seq2OneConfig):
            return seq2one_forward(roi, self.params, self.cfg, train, rng)
        return seq2seq_forward(roi, self.params, self.cfg, train, rng)

    def prediction_time_indices(self, t_len: int) -> np.ndarray:
        """Input time indices the prediction vector aligns with."""
        if isinstance(self.cfg, Seq2OneConfig):
            mid = self.cfg.midpoint
            return np.arange(mid, t_len - self.cfg.window + mid + 1)
        return np.arange(t_len)

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ShapeError(f"parameter name mismatch: {sorted(missing)[:4]}")
        for k, v in arrays.items():
            if tuple(v.shape) != self.params[k].shape:
                raise ShapeError(f"parameter '{k}': shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=self.params[k].dtype), requires_grad=True)
