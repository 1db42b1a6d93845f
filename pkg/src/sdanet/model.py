"""The match-mismatch network.

Three inputs (two stimulus envelope windows, one EEG window) run through
dilated-convolution encoder stacks; the two stimulus branches share one set
of weights. A cross-signal attention block (queries from the stimulus
features, keys/values from the EEG features) re-weights the stimulus stream
after every encoder block when enabled. Channelwise cosine similarities
between stimulus and EEG features, taken at a shallow and a deep block, are
concatenated and fed to a single-logit dense head that scores "input slot A
is the matched stimulus".

Parameters live in a :class:`ParamStore` (trainable arrays plus batch-norm
running-stat buffers) and are wrapped into autodiff Nodes per forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import serialize
from .autodiff import (
    BnStats,
    Node,
    as_node,
    batchnorm1d,
    bce_loss,
    concat,
    conv1d_dilated,
    dense,
    dot_along_time,
    dropout,
    l2_normalize,
    relu,
    reshape,
    scaled_dot_attention,
    sigmoid,
    slice_axis0,
)
from .errors import ShapeError
from .rng import RngState

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class SdanetConfig:
    """Architecture hyperparameters; defaults give the full 4-block model."""

    feature_channels: int = 16
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    shallow_index: int = 1
    deep_index: int = 3
    acm_enabled: bool = True
    sscm_enabled: bool = True
    ff_hidden: int | None = None  # None -> 2 * feature_channels
    dropout_rate: float = 0.2
    eeg_channels: int = 64
    stimulus_channels: int = 1
    window_samples: int = 192

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.feature_channels < 1 or self.kernel_size < 1:
            raise ValueError("feature_channels and kernel_size must be >= 1")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be a non-empty list of positive ints")
        if not 1 <= self.shallow_index <= len(self.dilations):
            raise ValueError(f"shallow_index {self.shallow_index} outside 1..{len(self.dilations)}")
        if not 1 <= self.deep_index <= len(self.dilations):
            raise ValueError(f"deep_index {self.deep_index} outside 1..{len(self.dilations)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.eeg_channels < 1 or self.stimulus_channels < 1:
            raise ValueError("channel counts must be >= 1")
        shrink = (self.kernel_size - 1) * sum(self.dilations)
        if self.window_samples <= shrink:
            raise ValueError(
                f"window_samples {self.window_samples} too short: the encoder stack removes {shrink} samples"
            )

    @property
    def hidden(self) -> int:
        return self.ff_hidden if self.ff_hidden is not None else 2 * self.feature_channels

    @property
    def n_blocks(self) -> int:
        return len(self.dilations)

    @property
    def embedding_dim(self) -> int:
        """Width of the classifier input: two similarity vectors per used block."""
        per_block = 2 * self.feature_channels
        return 2 * per_block if self.sscm_enabled else per_block

    def block_time_extents(self) -> list[int]:
        """Time extent entering each block, then leaving the last one."""
        extents = [self.window_samples]
        for d in self.dilations:
            extents.append(extents[-1] - (self.kernel_size - 1) * d)
        return extents

    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def to_dict(self) -> dict:
        return {
            "feature_channels": self.feature_channels,
            "kernel_size": self.kernel_size,
            "dilations": list(self.dilations),
            "shallow_index": self.shallow_index,
            "deep_index": self.deep_index,
            "acm_enabled": self.acm_enabled,
            "sscm_enabled": self.sscm_enabled,
            "ff_hidden": self.ff_hidden,
            "dropout_rate": self.dropout_rate,
            "eeg_channels": self.eeg_channels,
            "stimulus_channels": self.stimulus_channels,
            "window_samples": self.window_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdanetConfig":
        return cls(**{**d, "dilations": tuple(d["dilations"])})


class ParamStore:
    """Named trainable arrays plus non-trainable buffers (BN running stats)."""

    def __init__(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.params = params
        self.buffers = buffers

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def to_entries(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "ParamStore":
        params = {k[len("param.") :]: v.copy() for k, v in entries.items() if k.startswith("param.")}
        buffers = {k[len("buffer.") :]: v.copy() for k, v in entries.items() if k.startswith("buffer.")}
        return cls(params, buffers)

    def __eq__(self, other):
        if not isinstance(other, ParamStore):
            return NotImplemented
        if set(self.params) != set(other.params) or set(self.buffers) != set(other.buffers):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


def wrap_trainable(store: ParamStore, requires_grad: bool = True) -> dict[str, Node]:
    return {k: Node(v, requires_grad=requires_grad) for k, v in store.params.items()}


def init_params(config: SdanetConfig, rng: RngState) -> ParamStore:
    """He-normal weights, zero biases, unit gamma / zero beta, unset BN stats.

    Each tensor is drawn from its own named split of ``rng``, so a given
    (seed, name) always yields the same values regardless of which other
    parameters the configuration creates; ablation variants share identical
    backbone weights under one seed.
    """
    F = config.feature_channels
    k = config.kernel_size
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def he(name, shape, fan_in):
        return rng.split(name).normal(0.0, np.sqrt(2.0 / fan_in), shape)

    def add_branch(branch: str, in_channels: int):
        cin = in_channels
        for n in range(1, config.n_blocks + 1):
            params[f"{branch}.conv{n}.w"] = he(f"{branch}.conv{n}.w", (k, cin, F), k * cin)
            params[f"{branch}.conv{n}.b"] = np.zeros(F)
            params[f"{branch}.bn{n}.gamma"] = np.ones(F)
            params[f"{branch}.bn{n}.beta"] = np.zeros(F)
            buffers[f"{branch}.bn{n}.running_mean"] = np.zeros(F)
            buffers[f"{branch}.bn{n}.running_var"] = np.ones(F)
            buffers[f"{branch}.bn{n}.initialized"] = np.zeros(1)
            cin = F

    add_branch("audio", config.stimulus_channels)
    add_branch("eeg", config.eeg_channels)

    if config.acm_enabled:
        H = config.hidden
        for n in range(1, config.n_blocks + 1):
            for name in ("wq", "wk", "wv", "wo"):
                params[f"acm{n}.{name}.w"] = he(f"acm{n}.{name}.w", (F, F), F)
                params[f"acm{n}.{name}.b"] = np.zeros(F)
            params[f"acm{n}.ff1.w"] = he(f"acm{n}.ff1.w", (F, H), F)
            params[f"acm{n}.ff1.b"] = np.zeros(H)
            params[f"acm{n}.ff2.w"] = he(f"acm{n}.ff2.w", (H, F), H)
            params[f"acm{n}.ff2.b"] = np.zeros(F)

    D = config.embedding_dim
    params["head.w"] = he("head.w", (D, 1), D)
    params["head.b"] = np.zeros(1)
    return ParamStore(params, buffers)


def _bn_apply(x: Node, nodes, store: ParamStore, prefix: str, training: bool) -> Node:
    flag = store.buffers[f"{prefix}.initialized"]
    stats = None
    if flag[0] != 0:
        stats = BnStats(store.buffers[f"{prefix}.running_mean"], store.buffers[f"{prefix}.running_var"])
    out, new = batchnorm1d(
        x,
        nodes[f"{prefix}.gamma"],
        nodes[f"{prefix}.beta"],
        stats,
        "train" if training else "eval",
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )
    if training:
        store.buffers[f"{prefix}.running_mean"] = np.asarray(new.mean, dtype=np.float64)
        store.buffers[f"{prefix}.running_var"] = np.asarray(new.var, dtype=np.float64)
        flag[0] = 1.0
    return out


def encoder_block(x: Node, nodes, store: ParamStore, branch: str, n: int, dilation: int,
                  config: SdanetConfig, training: bool, rng: RngState | None) -> Node:
    """conv -> batch norm -> ReLU -> dropout; time extent shrinks by (k-1)*dilation."""
    h = conv1d_dilated(x, nodes[f"{branch}.conv{n}.w"], nodes[f"{branch}.conv{n}.b"], dilation)
    h = _bn_apply(h, nodes, store, f"{branch}.bn{n}", training)
    h = relu(h)
    return dropout(h, config.dropout_rate, rng, training)


def acm(x, e, params, mode: str = "eval", rng: RngState | None = None, dropout_rate: float = 0.0) -> Node:
    """Residual cross-attention plus feed-forward; re-weights the stimulus stream.

    ``params`` maps ``wq/wk/wv/wo/ff1/ff2`` (each with ``.w``/``.b``) to arrays
    or Nodes. With every weight and bias zero both residual branches vanish and
    the output equals ``x`` bit for bit.
    """
    x, e = as_node(x), as_node(e)
    if x.value.shape[-2] != e.value.shape[-2]:
        raise ShapeError(
            f"acm time extents differ: stimulus {x.value.shape[-2]} vs eeg {e.value.shape[-2]}"
        )
    training = mode == "train"
    q = dense(x, params["wq.w"], params["wq.b"])
    kk = dense(e, params["wk.w"], params["wk.b"])
    v = dense(e, params["wv.w"], params["wv.b"])
    att = dense(scaled_dot_attention(q, kk, v), params["wo.w"], params["wo.b"])
    att = dropout(att, dropout_rate, rng, training)
    h = x + att
    ff = dense(relu(dense(h, params["ff1.w"], params["ff1.b"])), params["ff2.w"], params["ff2.b"])
    ff = dropout(ff, dropout_rate, rng, training)
    return h + ff


def similarity_embedding(x, y, e) -> Node:
    """Channelwise cosine similarity of each stimulus stream with the EEG stream.

    All three inputs share shape ``[..., T, F]``; each is L2-normalized per
    channel along time, then reduced by a per-channel dot product. Output is
    ``[..., 2F]``: stimulus-A similarities then stimulus-B similarities.
    """
    x, y, e = as_node(x), as_node(y), as_node(e)
    if not (x.value.shape == y.value.shape == e.value.shape):
        raise ShapeError(
            f"similarity inputs must share a shape, got {x.value.shape}, {y.value.shape}, {e.value.shape}"
        )
    en = l2_normalize(e, axis=-2)
    sx = dot_along_time(l2_normalize(x, axis=-2), en)
    sy = dot_along_time(l2_normalize(y, axis=-2), en)
    return concat([sx, sy], axis=-1)


@dataclass
class ForwardTrace:
    """Per-block activations and the final probability of one forward pass."""

    x_feats: list[Node] = field(default_factory=list)
    y_feats: list[Node] = field(default_factory=list)
    e_feats: list[Node] = field(default_factory=list)
    e_s: Node | None = None
    e_d: Node | None = None
    embedding: Node | None = None
    p: Node | None = None
    single: bool = False

    def probabilities(self) -> np.ndarray:
        v = self.p.value
        return v[0] if self.single else v


def _canonical_input(arr, channels: int, window: int, what: str):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, ...]
        single = True
    elif a.ndim == 3:
        single = False
    else:
        raise ShapeError(f"{what} must be [T, C] or [B, T, C], got ndim {a.ndim}")
    if a.shape[1] != window:
        raise ShapeError(f"{what} time axis is {a.shape[1]}, expected {window}")
    if a.shape[2] != channels:
        raise ShapeError(f"{what} channel axis is {a.shape[2]}, expected {channels}")
    return a, single


def _acm_view(nodes, n: int):
    pre = f"acm{n}."
    return {k[len(pre) :]: v for k, v in nodes.items() if k.startswith(pre)}


def forward(store: ParamStore, eeg, stim_a, stim_b, config: SdanetConfig, mode: str = "eval",
            rng: RngState | None = None, nodes: dict[str, Node] | None = None) -> ForwardTrace:
    """Run the three-branch network; returns the full activation trace.

    Accepts single windows ``[T, C]`` or batches ``[B, T, C]``. Train mode
    updates batch-norm running stats in ``store`` (callers needing a pure
    function must pass a copy) and consumes ``rng`` for dropout. The two
    stimulus streams run through the shared auditory encoder as one stacked
    batch (so shared batch-norm statistics cover both), then the EEG branch,
    at each block; cross-attention re-weights each stimulus stream against
    that block's EEG features.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    training = mode == "train"
    if training and rng is None and config.dropout_rate > 0.0:
        raise ValueError("train-mode forward with dropout needs an RngState")

    ev, single_e = _canonical_input(eeg, config.eeg_channels, config.window_samples, "eeg")
    av, single_a = _canonical_input(stim_a, config.stimulus_channels, config.window_samples, "stim_a")
    bv, single_b = _canonical_input(stim_b, config.stimulus_channels, config.window_samples, "stim_b")
    if not (ev.shape[0] == av.shape[0] == bv.shape[0]):
        raise ShapeError(
            f"batch sizes differ: eeg {ev.shape[0]}, stim_a {av.shape[0]}, stim_b {bv.shape[0]}"
        )
    single = single_e and single_a and single_b
    b = ev.shape[0]

    if nodes is None:
        nodes = {k: Node(v) for k, v in store.params.items()}

    trace = ForwardTrace(single=single)
    s = Node(np.concatenate([av, bv], axis=0))  # stimulus A rows, then B rows
    e = Node(ev)
    for n, d in enumerate(config.dilations, start=1):
        s = encoder_block(s, nodes, store, "audio", n, d, config, training, rng)
        e = encoder_block(e, nodes, store, "eeg", n, d, config, training, rng)
        if config.acm_enabled:
            view = _acm_view(nodes, n)
            ekv = concat([e, e], axis=0)  # per-sample keys/values for both stimulus halves
            s = acm(s, ekv, view, mode, rng, config.dropout_rate)
        trace.x_feats.append(slice_axis0(s, 0, b))
        trace.y_feats.append(slice_axis0(s, b, 2 * b))
        trace.e_feats.append(e)

    def sim_at(i: int) -> Node:
        return similarity_embedding(trace.x_feats[i - 1], trace.y_feats[i - 1], trace.e_feats[i - 1])

    trace.e_d = sim_at(config.deep_index)
    if config.sscm_enabled:
        trace.e_s = sim_at(config.shallow_index)
        trace.embedding = concat([trace.e_s, trace.e_d], axis=-1)
    else:
        trace.embedding = trace.e_d
    logit = dense(trace.embedding, nodes["head.w"], nodes["head.b"])
    trace.p = sigmoid(reshape(logit, (ev.shape[0],)))
    return trace


def predict(store: ParamStore, eeg, stim_a, stim_b, config: SdanetConfig):
    """Eval-mode labels and probabilities; label 1 means slot A is the match.

    Ties (p == 0.5 exactly) resolve to label 0.
    """
    trace = forward(store, eeg, stim_a, stim_b, config, mode="eval")
    probs = trace.probabilities()
    labels = (np.asarray(probs) > 0.5).astype(np.int64)
    if trace.single:
        return int(labels), float(probs)
    return labels, probs


def loss_on_batch(store: ParamStore, eeg, stim_a, stim_b, labels, config: SdanetConfig,
                  mode: str = "eval", rng: RngState | None = None,
                  nodes: dict[str, Node] | None = None):
    """Forward plus mean BCE; returns (loss Node, trace)."""
    trace = forward(store, eeg, stim_a, stim_b, config, mode=mode, rng=rng, nodes=nodes)
    y = np.asarray(labels, dtype=np.float64).reshape(trace.p.value.shape)
    return bce_loss(trace.p, y), trace


def average_params(snapshots: list[ParamStore], k: int) -> ParamStore:
    """Elementwise mean of the last ``k`` snapshots, buffers included.

    Computed as ``first + mean(s_i - first)`` with sequential accumulation in
    snapshot order: bit-stable across runs, and k identical snapshots come
    back exactly unchanged (a plain running sum divided by k would not).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(snapshots) < k:
        raise ValueError(f"need at least {k} snapshots, have {len(snapshots)}")
    last = snapshots[-k:]
    ref = last[0]
    for i, s in enumerate(last[1:], start=1):
        if set(s.params) != set(ref.params) or set(s.buffers) != set(ref.buffers):
            raise ShapeError(f"snapshot {i} has a different parameter set")
        for name in ref.params:
            if s.params[name].shape != ref.params[name].shape:
                raise ShapeError(f"snapshot {i} parameter {name!r} shape differs")
        for name in ref.buffers:
            if s.buffers[name].shape != ref.buffers[name].shape:
                raise ShapeError(f"snapshot {i} buffer {name!r} shape differs")

    def avg(getter):
        out = {}
        for name in getter(ref):
            first = getter(ref)[name]
            acc = np.zeros_like(first)
            for s in last[1:]:
                acc += getter(s)[name] - first
            out[name] = first + acc / k
        return out

    return ParamStore(avg(lambda s: s.params), avg(lambda s: s.buffers))


# ---------------------------------------------------------------------------
# checkpoint glue


def save_model_checkpoint(path, store: ParamStore, config: SdanetConfig, epoch: int,
                          val_loss: float, adam_entries: dict[str, np.ndarray] | None = None):
    entries = store.to_entries()
    if adam_entries:
        entries.update(adam_entries)
    meta = {"config": config.to_dict(), "epoch": int(epoch), "val_loss": float(val_loss)}
    serialize.save_checkpoint(path, entries, meta)


def load_model_checkpoint(path):
    """Returns (store, config, metadata, adam_entries)."""
    meta, entries = serialize.load_checkpoint(path)
    store = ParamStore.from_entries(entries)
    adam = {k: v for k, v in entries.items() if k.startswith("adam.")}
    config = SdanetConfig.from_dict(meta["config"])
    return store, config, meta, adam


def ablation_config(base: SdanetConfig, variant: str) -> SdanetConfig:
    """The three standard variants: backbone_dscm, acm, acm_sscm."""
    if variant == "backbone_dscm":
        return replace(base, acm_enabled=False, sscm_enabled=False)
    if variant == "acm":
        return replace(base, acm_enabled=True, sscm_enabled=False)
    if variant == "acm_sscm":
        return replace(base, acm_enabled=True, sscm_enabled=True)
    raise ValueError(f"unknown variant {variant!r}")
