"""Training: quantile bins, the mixture evidential loss, weighted-k-means
initialization of the prototype bank, and gradient-based fitting.

The loss here is the plain numpy reference used by tests and by the
finite-difference side of the gradient check; the optimizer itself runs on
an autodiff engine (see _engine) whose gradients must agree with central
finite differences of this reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .clustering import kmeans
from .evidence import ComponentPrototype, PrototypeBank, inv_softplus, slide_evidence, survival_function
from .gmm import SlideEmbedding

__all__ = [
    "BinGrid",
    "PROBABILITY_FLOOR",
    "SurvivalRecord",
    "TrainConfig",
    "TrainLogRow",
    "bank_parameters",
    "bank_from_parameters",
    "central_difference",
    "grad_check",
    "init_bank",
    "mixture_evidential_loss",
    "nll_subject",
    "nll_uncensored",
    "quantile_bins",
    "train",
]

PROBABILITY_FLOOR = 1e-12
INIT_VARIANCE_FLOOR = 1e-4
INIT_PRECISION_SCALE = 4.0


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: observed time (same units across the cohort) and whether
    that time is right-censored."""

    subject_id: str
    time: float
    censored: bool

    def __post_init__(self) -> None:
        if not (math.isfinite(self.time) and self.time > 0.0):
            raise ValueError(f"time must be finite and positive, got {self.time}")


@dataclass(frozen=True)
class BinGrid:
    """Strictly increasing time-bin edges starting at 0.  The last edge is a
    finite stand-in just above the largest uncensored time; the uncensored
    likelihood treats it as +inf (survival mass 0 beyond it)."""

    edges: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or e.size < 2:
            raise ValueError("need at least two edges")
        if e[0] != 0.0:
            raise ValueError("first edge must be 0")
        if not (np.diff(e) > 0).all():
            raise ValueError("edges must be strictly increasing")
        object.__setattr__(self, "edges", e)

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    def bin_index(self, t: float) -> int:
        """Half-open membership [T_j, T_{j+1}); times at or past the last
        edge fall in the last bin."""
        j = int(np.searchsorted(self.edges, t, side="right")) - 1
        return min(max(j, 0), self.n_bins - 1)


def quantile_bins(records: Sequence[SurvivalRecord], n_bins: int) -> BinGrid:
    """Bins holding equal counts of uncensored training times: interior
    edges at the j/B empirical quantiles (linear interpolation), first edge
    0, last edge just above the largest uncensored time."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    unc = np.sort([r.time for r in records if not r.censored])
    if np.unique(unc).size < n_bins:
        raise ValueError(
            f"need at least {n_bins} distinct uncensored times, "
            f"got {np.unique(unc).size}"
        )
    interior = [
        float(np.quantile(unc, j / n_bins, method="linear"))
        for j in range(1, n_bins)
    ]
    edges = np.array([0.0, *interior, float(unc[-1]) * 1.0001])
    if not (np.diff(edges) > 0).all():
        raise ValueError("tied quantiles: too few distinct uncensored times")
    return BinGrid(edges=edges)


def _floored_log(p: float) -> float:
    return math.log(max(p, PROBABILITY_FLOOR))


def nll_uncensored(
    survival: Callable[[float], float], rec: SurvivalRecord, grid: BinGrid
) -> float:
    """Negative log probability mass in the subject's bin.  S(0) counts as
    exactly 1 and survival past the last edge as exactly 0; the mass is
    floored before the log."""
    if rec.censored:
        return 0.0
    j = grid.bin_index(rec.time)
    s_left = 1.0 if j == 0 else survival(float(grid.edges[j]))
    s_right = 0.0 if j == grid.n_bins - 1 else survival(float(grid.edges[j + 1]))
    return -_floored_log(s_left - s_right)


def nll_subject(
    survival: Callable[[float], float], rec: SurvivalRecord, grid: BinGrid
) -> float:
    """Uncensored subjects contribute the bin mass term; censored subjects
    contribute -log S at their bin's right edge (the finite last edge for
    the final bin)."""
    if not rec.censored:
        return nll_uncensored(survival, rec, grid)
    j = grid.bin_index(rec.time)
    return -_floored_log(survival(float(grid.edges[j + 1])))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the reference configuration
    (adaptive moments 0.9/0.999 with stabilizer 1e-8 are fixed)."""

    alpha: float = 0.5
    xi: float = 0.01
    rho: float = 0.01
    bins: int = 4
    learning_rate: float = 2e-4
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    tau: float = 0.01
    n_prototypes: int | tuple[int, ...] = 2
    weight_decay: float = 2e-4

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.xi < 0 or self.rho < 0 or self.weight_decay < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.bins < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid bins/epochs/batch_size")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")

    def prototypes_for(self, n_components: int) -> tuple[int, ...]:
        k = self.n_prototypes
        if isinstance(k, int):
            return (k,) * n_components
        k = tuple(int(v) for v in k)
        if len(k) != n_components:
            raise ValueError(
                f"need {n_components} prototype counts, got {len(k)}"
            )
        return k


def _bank_penalties(bank: PrototypeBank) -> tuple[float, float]:
    hs = [p.h for protos in bank.components for p in protos]
    gs = [p.gamma**2 for protos in bank.components for p in protos]
    return float(np.mean(hs)), float(np.mean(gs))


def mixture_evidential_loss(
    batch: Sequence[tuple[SlideEmbedding, SurvivalRecord]],
    bank: PrototypeBank,
    grid: BinGrid,
    cfg: TrainConfig,
) -> float:
    """Mean of (1 - alpha) * l_all + alpha * l_uncensored over the batch,
    plus xi * mean(h) and rho * mean(gamma^2) over all prototypes."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    data = 0.0
    for emb, rec in batch:
        m = slide_evidence(emb, bank)
        surv = lambda t: survival_function(m, t, bank.lambda_mix)  # noqa: E731
        l_unc = nll_uncensored(surv, rec, grid)
        l_all = nll_subject(surv, rec, grid)
        data += (1.0 - cfg.alpha) * l_all + cfg.alpha * l_unc
    r1, r2 = _bank_penalties(bank)
    return data / len(batch) + cfg.xi * r1 + cfg.rho * r2


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _cosine_distance(rows: np.ndarray, center: np.ndarray) -> np.ndarray:
    cn = np.linalg.norm(center)
    rn = np.linalg.norm(rows, axis=1)
    cos = rows @ center / np.maximum(rn * cn, 1e-12)
    return 0.5 * (1.0 - np.clip(cos, -1.0, 1.0))


def init_bank(
    train_set: Sequence[tuple[SlideEmbedding, SurvivalRecord]],
    cfg: TrainConfig,
    lambda_mix: float = 0.1,
) -> PrototypeBank:
    """Evidential initialization by weighted k-means.

    Per component: slides with component weight below tau are dropped (tau
    falls back to 0 for that component if nothing survives), the remaining
    component means are l2-normalized and clustered with the component
    weights as sample weights.  Each cluster yields one prototype: anchor at
    the centroid, intercept at the weighted mean log time, variance at the
    weighted log-time variance (floored), precision 4 x the cluster's mean
    component weight, decay 1/sqrt(mean squared cosine distance).
    """
    if len(train_set) == 0:
        raise ValueError("training set must be nonempty")
    rng = np.random.default_rng([cfg.seed, 0])
    n_comp = train_set[0][0].n_components
    ks = cfg.prototypes_for(n_comp)
    log_times = np.log([rec.time for _, rec in train_set])
    components = []
    for c in range(n_comp):
        pis = np.array([emb.weights[c] for emb, _ in train_set])
        mask = pis > cfg.tau
        if not mask.any():
            mask = pis > 0.0
        weights = pis[mask]
        if not mask.any():
            mask = np.ones(pis.size, dtype=bool)
            weights = np.ones(pis.size)
        feats = _normalize_rows(
            np.stack([emb.means[c] for emb, _ in train_set])[mask]
        )
        times_c = log_times[mask]
        k_eff = min(ks[c], feats.shape[0])
        centers, labels = kmeans(feats, k_eff, rng, weights=weights)
        protos = []
        for k in range(k_eff):
            member = labels == k
            w = weights[member]
            wsum = w.sum()
            if wsum <= 0:
                w = np.ones(member.sum())
                wsum = w.sum()
            b0 = float((w @ times_c[member]) / wsum)
            var = float((w @ (times_c[member] - b0) ** 2) / wsum)
            var = max(var, INIT_VARIANCE_FLOOR)
            h0 = max(INIT_PRECISION_SCALE * float(pis[mask][member].mean()), 1e-3)
            # d_cos = (1 - cos)/2 is itself a squared (chord) distance, so a
            # member at the cluster's mean distance starts near exp(-1).
            d_cos = _cosine_distance(feats[member], centers[k])
            gamma = 1.0 / math.sqrt(max(float(d_cos.mean()), 1e-6))
            anchor = centers[k]
            if np.linalg.norm(anchor) <= 1e-12:
                anchor = feats[member][0]
            protos.append(
                ComponentPrototype(
                    anchor=anchor,
                    coeffs=np.zeros(2 * feats.shape[1] + 1),
                    intercept=b0,
                    log_var=math.log(var),
                    raw_h=inv_softplus(h0),
                    gamma=gamma,
                )
            )
        components.append(protos)
    return PrototypeBank(components, lambda_mix=lambda_mix)


def bank_parameters(bank: PrototypeBank) -> list[dict[str, np.ndarray]]:
    """Stack prototype parameters per component (anchors, coeffs, intercepts,
    log variances, raw precisions, decays) for the optimizer."""
    out = []
    for protos in bank.components:
        out.append(
            {
                "anchor": np.stack([p.anchor for p in protos]),
                "coeffs": np.stack([p.coeffs for p in protos]),
                "intercept": np.array([p.intercept for p in protos]),
                "log_var": np.array([p.log_var for p in protos]),
                "raw_h": np.array([p.raw_h for p in protos]),
                "gamma": np.array([p.gamma for p in protos]),
            }
        )
    return out


def bank_from_parameters(
    params: Sequence[dict[str, np.ndarray]], lambda_mix: float
) -> PrototypeBank:
    components = []
    for block in params:
        protos = []
        for k in range(np.asarray(block["intercept"]).size):
            protos.append(
                ComponentPrototype(
                    anchor=np.asarray(block["anchor"])[k],
                    coeffs=np.asarray(block["coeffs"])[k],
                    intercept=float(np.asarray(block["intercept"])[k]),
                    log_var=float(np.asarray(block["log_var"])[k]),
                    raw_h=float(np.asarray(block["raw_h"])[k]),
                    gamma=float(np.asarray(block["gamma"])[k]),
                )
            )
        components.append(protos)
    return PrototypeBank(components, lambda_mix=lambda_mix)


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float | None
    wall_time: float


def train(
    train_set: Sequence[tuple[SlideEmbedding, SurvivalRecord]],
    val_set: Sequence[tuple[SlideEmbedding, SurvivalRecord]],
    cfg: TrainConfig,
    lambda_mix: float = 0.1,
    init: PrototypeBank | None = None,
) -> tuple[PrototypeBank, list[TrainLogRow]]:
    """Minimize the mixture evidential loss over all prototype parameters
    with adaptive-moment gradient descent, decoupled weight decay (applied
    to coefficients and intercepts only) and a cosine-decayed step size.

    Deterministic for a given config and data; returns the parameters with
    the best validation loss when a validation set is given, else the final
    parameters, together with the per-epoch log.
    """
    from . import _engine

    if len(train_set) == 0:
        raise ValueError("training set must be nonempty")
    grid = quantile_bins([rec for _, rec in train_set], cfg.bins)
    bank0 = init if init is not None else init_bank(train_set, cfg, lambda_mix)
    params = bank_parameters(bank0)
    lam = bank0.lambda_mix

    data = _engine.prepare_data(train_set, grid)
    val_data = _engine.prepare_data(val_set, grid) if len(val_set) else None
    rng = np.random.default_rng([cfg.seed, 1])
    fitted, log = _engine.fit(
        params,
        data,
        cfg,
        lam,
        rng,
        val_data=val_data,
        subject_ids=[rec.subject_id for _, rec in train_set],
    )
    rows = [TrainLogRow(*entry) for entry in log]
    return bank_from_parameters(fitted, lam), rows


def central_difference(f: Callable[[float], float], x: float, eps: float) -> float:
    """Second-order central finite difference of a scalar function."""
    return (f(x + eps) - f(x - eps)) / (2.0 * eps)


def grad_check(
    bank: PrototypeBank,
    batch: Sequence[tuple[SlideEmbedding, SurvivalRecord]],
    grid: BinGrid,
    cfg: TrainConfig,
    eps: float = 1e-5,
    max_params: int = 20,
) -> float:
    """Max relative disagreement between the engine gradient and central
    finite differences of the numpy reference loss, over a random sample of
    unconstrained parameters.  Relative error uses the denominator
    max(|grad|, |fd|, 1e-8)."""
    from . import _engine

    flat, unravel = _engine.flatten(bank_parameters(bank))
    grad = _engine.loss_gradient(bank_parameters(bank), batch, grid, cfg, bank.lambda_mix)

    def reference(vec: np.ndarray) -> float:
        b = bank_from_parameters(unravel(vec), bank.lambda_mix)
        return mixture_evidential_loss(batch, b, grid, cfg)

    rng = np.random.default_rng([cfg.seed, 2])
    count = min(max_params, flat.size)
    picks = rng.choice(flat.size, size=count, replace=False)
    worst = 0.0
    for i in picks:
        def along(v: float, i: int = int(i)) -> float:
            vec = flat.copy()
            vec[i] = v
            return reference(vec)

        fd = central_difference(along, float(flat[i]), eps)
        g = float(grad[i])
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-8))
    return worst
