"""Finite-difference verification battery.

Each differentiable op gets a scalar-valued probe function checked against
central differences over many random shapes/seeds; the full network is
checked end to end on a tiny configuration (every parameter of the BCE loss).
The CLI's gradcheck command and the acceptance suite both run these.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Node, grad_check
from .model import BN_EPS, ParamStore, SdanetConfig, init_params, loss_on_batch
from .rng import RngState

OP_NAMES = (
    "conv1d_dilated",
    "batchnorm1d_train",
    "scaled_dot_attention",
    "pointwise_relu",
    "pointwise_sigmoid",
    "dense",
    "l2_normalize",
    "dot_along_time",
    "concat",
    "dropout",
    "bce_loss",
)


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Nudge entries off the ReLU kink so finite differences stay one-sided."""
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def _weighted(node: Node, coeffs: np.ndarray) -> Node:
    return ad.sum_(ad.mul(node, coeffs))


def check_op(name: str, seed: int, step: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Gradient-check one op at one seed with small random shapes."""
    rng = RngState(seed)
    if name == "conv1d_dilated":
        t = int(rng.integers(10, 16))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        dil = int(rng.integers(1, 4))
        x = rng.normal(0, 1, (t, cin))
        w = rng.normal(0, 1, (3, cin, cout))
        b = rng.normal(0, 1, cout)
        coeffs = rng.normal(0, 1, (t - 2 * dil, cout))
        return grad_check(lambda n: _weighted(ad.conv1d_dilated(n[0], n[1], n[2], dil), coeffs),
                          [x, w, b], step, tol)
    if name == "batchnorm1d_train":
        b_, t, c = 2, int(rng.integers(4, 8)), int(rng.integers(1, 4))
        x = rng.normal(0, 1, (b_, t, c))
        gamma = rng.normal(1, 0.2, c)
        beta = rng.normal(0, 0.2, c)
        coeffs = rng.normal(0, 1, (b_, t, c))

        def f(n):
            out, _ = ad.batchnorm1d(n[0], n[1], n[2], None, "train", eps=BN_EPS)
            return _weighted(out, coeffs)

        return grad_check(f, [x, gamma, beta], step, tol)
    if name == "scaled_dot_attention":
        tq, tk, d = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        q = rng.normal(0, 1, (tq, d))
        k = rng.normal(0, 1, (tk, d))
        v = rng.normal(0, 1, (tk, d))
        coeffs = rng.normal(0, 1, (tq, d))
        return grad_check(lambda n: _weighted(ad.scaled_dot_attention(n[0], n[1], n[2]), coeffs),
                          [q, k, v], step, tol)
    if name == "pointwise_relu":
        x = _away_from_zero(rng.normal(0, 1, (5, 4)))
        coeffs = rng.normal(0, 1, (5, 4))
        return grad_check(lambda n: _weighted(ad.relu(n[0]), coeffs), [x], step, tol)
    if name == "pointwise_sigmoid":
        x = rng.normal(0, 2, (5, 4))
        coeffs = rng.normal(0, 1, (5, 4))
        return grad_check(lambda n: _weighted(ad.sigmoid(n[0]), coeffs), [x], step, tol)
    if name == "dense":
        t, din, dout = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = rng.normal(0, 1, (t, din))
        w = rng.normal(0, 1, (din, dout))
        b = rng.normal(0, 1, dout)
        coeffs = rng.normal(0, 1, (t, dout))
        return grad_check(lambda n: _weighted(ad.dense(n[0], n[1], n[2]), coeffs),
                          [x, w, b], step, tol)
    if name == "l2_normalize":
        t, c = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        x = rng.normal(0, 1, (t, c)) + 0.1
        coeffs = rng.normal(0, 1, (t, c))
        return grad_check(lambda n: _weighted(ad.l2_normalize(n[0], axis=-2), coeffs),
                          [x], step, tol)
    if name == "dot_along_time":
        t, c = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        a = rng.normal(0, 1, (t, c))
        b = rng.normal(0, 1, (t, c))
        coeffs = rng.normal(0, 1, c)
        return grad_check(lambda n: _weighted(ad.dot_along_time(n[0], n[1]), coeffs),
                          [a, b], step, tol)
    if name == "concat":
        t, c1, c2 = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        a = rng.normal(0, 1, (t, c1))
        b = rng.normal(0, 1, (t, c2))
        coeffs = rng.normal(0, 1, (t, c1 + c2))
        return grad_check(lambda n: _weighted(ad.concat([n[0], n[1]], axis=-1), coeffs),
                          [a, b], step, tol)
    if name == "dropout":
        x = rng.normal(0, 1, (6, 5))
        coeffs = rng.normal(0, 1, (6, 5))
        mask_seed = seed + 1

        # fresh-but-identical RngState per evaluation freezes the mask, so the
        # finite differences probe the same linear function
        def f(n):
            return _weighted(ad.dropout(n[0], 0.3, RngState(mask_seed), training=True), coeffs)

        return grad_check(f, [x], step, tol)
    if name == "bce_loss":
        logits = rng.normal(0, 1.5, 6)
        y = (rng.random(6) > 0.5).astype(np.float64)
        return grad_check(lambda n: ad.bce_loss(ad.sigmoid(n[0]), y), [logits], step, tol)
    raise ValueError(f"unknown op {name!r}")


def run_op_checks(n_seeds: int = 20, step: float = 1e-5, tol: float = 1e-5):
    """Every op over ``n_seeds`` random shapes; returns {op: worst report}."""
    results = {}
    for name in OP_NAMES:
        worst = None
        for seed in range(n_seeds):
            rep = check_op(name, seed, step, tol)
            if worst is None or rep.max_rel_err > worst.max_rel_err:
                worst = rep
        results[name] = worst
    return results


TINY_CONFIG = SdanetConfig(feature_channels=4, eeg_channels=8, window_samples=64,
                           dropout_rate=0.0)


def model_grad_check(seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                     config: SdanetConfig | None = None) -> GradCheckReport:
    """Check every parameter gradient of the BCE loss on a tiny full model.

    Runs in train mode (batch-norm on batch stats) with dropout 0 so the loss
    is a deterministic function of the parameters.
    """
    cfg = config or TINY_CONFIG
    rng = RngState(seed)
    store = init_params(cfg, rng.split("init"))
    names = list(store.params)
    b = 2
    eeg = rng.normal(0, 1, (b, cfg.window_samples, cfg.eeg_channels))
    stim_a = rng.normal(0, 1, (b, cfg.window_samples, cfg.stimulus_channels))
    stim_b = rng.normal(0, 1, (b, cfg.window_samples, cfg.stimulus_channels))
    labels = (rng.random(b) > 0.5).astype(np.float64)

    def f(node_list):
        nodes = dict(zip(names, node_list))
        scratch = ParamStore(dict(store.params), {k: v.copy() for k, v in store.buffers.items()})
        loss, _ = loss_on_batch(scratch, eeg, stim_a, stim_b, labels, cfg, mode="train",
                                nodes=nodes)
        return loss

    return grad_check(f, [store.params[n] for n in names], step, tol)


def measure_receptive_field(window: int = 192, impulse_at: int = 96,
                            dilations=(1, 2, 4, 8), kernel_size: int = 3) -> int:
    """Impulse-response support of the encoder stack, in samples.

    Uses an all-positive linear configuration (uniform positive conv taps,
    batch norm pinned to the identity, zero biases) so ReLU is pass-through
    and support cannot cancel; the count of nonzero output rows is exactly the
    stack's receptive field.
    """
    cfg = SdanetConfig(feature_channels=4, stimulus_channels=1, eeg_channels=1,
                       window_samples=window, dilations=tuple(dilations),
                       kernel_size=kernel_size, dropout_rate=0.0, acm_enabled=False,
                       sscm_enabled=False, deep_index=len(dilations), shallow_index=1)
    store = init_params(cfg, RngState(0))
    for name in list(store.params):
        if ".conv" in name and name.endswith(".w"):
            store.params[name] = np.full_like(store.params[name], 0.1)
        elif name.endswith(".b") or name.endswith(".beta"):
            store.params[name] = np.zeros_like(store.params[name])
        elif name.endswith(".gamma"):
            store.params[name] = np.ones_like(store.params[name])
    for name in list(store.buffers):
        if name.endswith(".running_mean"):
            store.buffers[name][:] = 0.0
        elif name.endswith(".running_var"):
            store.buffers[name][:] = 1.0 - BN_EPS  # sqrt(var + eps) == 1 exactly
        elif name.endswith(".initialized"):
            store.buffers[name][:] = 1.0

    from .model import encoder_block

    x = np.zeros((1, window, 1))
    x[0, impulse_at, 0] = 1.0
    nodes = {k: Node(v) for k, v in store.params.items()}
    h = Node(x)
    for n, d in enumerate(cfg.dilations, start=1):
        h = encoder_block(h, nodes, store, "audio", n, d, cfg, training=False, rng=None)
    support = np.any(h.value[0] != 0.0, axis=1)
    return int(support.sum())
