"""Autodiff/optimizer engine behind training.train and training.grad_check.

Re-expresses the mixture evidential loss on stacked arrays so jax can
differentiate it; the numbers must agree with the numpy reference in
training.py to float64 roundoff (the test suite enforces this, and
grad_check compares these gradients against finite differences of the
reference).  The update rule is written out explicitly: adaptive moments
0.9/0.999 with stabilizer 1e-8, decoupled weight decay on coefficients and
intercepts only, cosine step-size decay to zero over the total step count.
"""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

import jax.numpy as jnp
from jax.flatten_util import ravel_pytree
from jax.nn import softplus
from jax.scipy.special import ndtr

from .evidence import SIMILARITY_EXPONENT_CAP
from .training import PROBABILITY_FLOOR, BinGrid, TrainConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def prepare_data(batch, grid: BinGrid) -> dict[str, np.ndarray]:
    """Stack slide embeddings and outcomes into dense arrays."""
    if len(batch) == 0:
        return {}
    pis = np.stack([emb.weights for emb, _ in batch])
    means = np.stack([emb.means for emb, _ in batch])
    zs = np.stack([emb.flattened() for emb, _ in batch])
    binj = np.array([grid.bin_index(rec.time) for _, rec in batch], dtype=np.int64)
    cens = np.array([1.0 if rec.censored else 0.0 for _, rec in batch])
    return {
        "pis": pis,
        "means": means,
        "zs": zs,
        "binj": binj,
        "cens": cens,
        "log_edges": np.log(grid.edges[1:]),
    }


def _loss_impl(params, pis, means, zs, binj, cens, log_edges, lam, alpha, xi, rho):
    n, n_comp = pis.shape
    n_bins = log_edges.shape[0]
    surv = jnp.zeros((n, n_bins))
    r1_sum = 0.0
    r2_sum = 0.0
    n_protos = 0
    for c in range(n_comp):
        block = params[c]
        h_k = softplus(block["raw_h"])  # (K,)
        var_k = jnp.exp(block["log_var"])  # (K,)
        mean_c = means[:, c, :]  # (n, d)
        anchors = block["anchor"]  # (K, d)
        cos = (mean_c @ anchors.T) / (
            jnp.linalg.norm(mean_c, axis=1, keepdims=True)
            * jnp.linalg.norm(anchors, axis=1)[None, :]
        )
        sim = jnp.exp(
            -jnp.minimum(
                (block["gamma"][None, :] ** 2) * 0.5 * (1.0 - cos),
                SIMILARITY_EXPONENT_CAP,
            )
        )  # (n, K)
        mu_k = zs[:, c, :] @ block["coeffs"].T + block["intercept"][None, :]
        sh = sim * h_k[None, :]
        h_c = sh.sum(axis=1)  # (n,)
        mu_c = (sh * mu_k).sum(axis=1) / h_c
        var_c = ((sh**2) * var_k[None, :]).sum(axis=1) / h_c**2
        sig = jnp.sqrt(var_c)
        q = 1.0 + h_c * var_c
        sq = sig * jnp.sqrt(q)
        diff = log_edges[None, :] - mu_c[:, None]  # (n, B)
        pl_x = jnp.exp(-h_c[:, None] * diff**2 / (2.0 * q[:, None])) / jnp.sqrt(q)[
            :, None
        ]
        upper = 1.0 - ndtr(diff / sig[:, None]) + pl_x * ndtr(diff / sq[:, None])
        # lambda * Bel + (1 - lambda) * Pl, with Bel = Pl - pl(x)
        surv = surv + pis[:, c][:, None] * (upper - lam * pl_x)
        r1_sum = r1_sum + h_k.sum()
        r2_sum = r2_sum + (block["gamma"] ** 2).sum()
        n_protos += int(block["raw_h"].shape[0])

    rows = jnp.arange(n)
    s_left = jnp.where(binj == 0, 1.0, surv[rows, jnp.maximum(binj - 1, 0)])
    s_right = jnp.where(binj == n_bins - 1, 0.0, surv[rows, jnp.minimum(binj, n_bins - 1)])
    s_cens = surv[rows, binj]
    l_unc = -jnp.log(jnp.clip(s_left - s_right, PROBABILITY_FLOOR, None)) * (1.0 - cens)
    l_all = l_unc + cens * -jnp.log(jnp.clip(s_cens, PROBABILITY_FLOOR, None))
    data = jnp.mean((1.0 - alpha) * l_all + alpha * l_unc)
    return data + xi * r1_sum / n_protos + rho * r2_sum / n_protos


def make_loss(
    cfg: TrainConfig, lam: float, log_edges: np.ndarray
) -> Callable:
    edges = jnp.asarray(log_edges)

    def loss(params, pis, means, zs, binj, cens):
        return _loss_impl(
            params, pis, means, zs, binj, cens, edges, lam, cfg.alpha, cfg.xi, cfg.rho
        )

    return loss


def flatten(params: Sequence[dict[str, np.ndarray]]):
    """Flatten the parameter blocks to one float64 vector; returns the
    vector and the inverse mapping back to numpy blocks."""
    tree = tuple(
        {k: jnp.asarray(v, dtype=jnp.float64) for k, v in block.items()}
        for block in params
    )
    flat, unravel = ravel_pytree(tree)

    def to_numpy(vec: np.ndarray):
        tree = unravel(jnp.asarray(vec, dtype=jnp.float64))
        return [{k: np.asarray(v) for k, v in block.items()} for block in tree]

    return np.asarray(flat), to_numpy


def loss_value(params, batch, grid: BinGrid, cfg: TrainConfig, lam: float) -> float:
    """Engine-side loss on a batch of (embedding, record) pairs."""
    data = prepare_data(batch, grid)
    loss = make_loss(cfg, lam, data["log_edges"])
    tree = tuple({k: jnp.asarray(v) for k, v in block.items()} for block in params)
    return float(
        loss(tree, data["pis"], data["means"], data["zs"], data["binj"], data["cens"])
    )


def loss_gradient(params, batch, grid: BinGrid, cfg: TrainConfig, lam: float) -> np.ndarray:
    """Flat gradient of the engine loss, ordered like flatten()."""
    data = prepare_data(batch, grid)
    loss = make_loss(cfg, lam, data["log_edges"])
    tree = tuple({k: jnp.asarray(v) for k, v in block.items()} for block in params)
    flat, unravel = ravel_pytree(tree)

    def on_flat(vec):
        return loss(
            unravel(vec),
            data["pis"],
            data["means"],
            data["zs"],
            data["binj"],
            data["cens"],
        )

    return np.asarray(jax.grad(on_flat)(flat))


def _decay_mask(params: Sequence[dict[str, np.ndarray]]) -> np.ndarray:
    masked = tuple(
        {
            k: jnp.ones_like(jnp.asarray(v))
            if k in ("coeffs", "intercept")
            else jnp.zeros_like(jnp.asarray(v))
            for k, v in block.items()
        }
        for block in params
    )
    return np.asarray(ravel_pytree(masked)[0])


def fit(
    params: Sequence[dict[str, np.ndarray]],
    data: dict[str, np.ndarray],
    cfg: TrainConfig,
    lam: float,
    rng: np.random.Generator,
    val_data: dict[str, np.ndarray] | None = None,
    subject_ids: Sequence[str] | None = None,
):
    """Run the optimizer; returns the final (or best-validation) parameter
    blocks and per-epoch log tuples (epoch, train_loss, val_loss, wall)."""
    flat, to_numpy = flatten(params)
    tree0 = tuple({k: jnp.asarray(v) for k, v in block.items()} for block in params)
    _, unravel = ravel_pytree(tree0)
    loss = make_loss(cfg, lam, data["log_edges"])

    def on_flat(vec, pis, means, zs, binj, cens):
        return loss(unravel(vec), pis, means, zs, binj, cens)

    value_and_grad = jax.jit(jax.value_and_grad(on_flat))
    loss_jit = jax.jit(on_flat)

    n = data["pis"].shape[0]
    n_batches = max(1, -(-n // cfg.batch_size))
    total_steps = max(1, cfg.epochs * n_batches)
    mask = _decay_mask(params)
    moment1 = np.zeros_like(flat)
    moment2 = np.zeros_like(flat)
    step = 0
    best_val = np.inf
    best_flat = flat.copy()
    log = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            value, grad = value_and_grad(
                jnp.asarray(flat),
                data["pis"][idx],
                data["means"][idx],
                data["zs"][idx],
                data["binj"][idx],
                data["cens"][idx],
            )
            value = float(value)
            if not np.isfinite(value):
                ids = (
                    [subject_ids[i] for i in idx]
                    if subject_ids is not None
                    else list(map(int, idx))
                )
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} on batch {ids}"
                )
            grad = np.asarray(grad)
            lr_t = cfg.learning_rate * 0.5 * (
                1.0 + np.cos(np.pi * step / total_steps)
            )
            step += 1
            moment1 = ADAM_BETA1 * moment1 + (1.0 - ADAM_BETA1) * grad
            moment2 = ADAM_BETA2 * moment2 + (1.0 - ADAM_BETA2) * grad**2
            m_hat = moment1 / (1.0 - ADAM_BETA1**step)
            v_hat = moment2 / (1.0 - ADAM_BETA2**step)
            flat = flat - lr_t * (
                m_hat / (np.sqrt(v_hat) + ADAM_EPS) + cfg.weight_decay * mask * flat
            )
            epoch_loss += value * idx.size / n
        val_loss = None
        if val_data is not None:
            val_loss = float(
                loss_jit(
                    jnp.asarray(flat),
                    val_data["pis"],
                    val_data["means"],
                    val_data["zs"],
                    val_data["binj"],
                    val_data["cens"],
                )
            )
            if val_loss < best_val:
                best_val = val_loss
                best_flat = flat.copy()
        log.append((epoch, epoch_loss, val_loss, time.perf_counter() - start))
    final = best_flat if val_data is not None and cfg.epochs > 0 else flat
    return to_numpy(final), log
