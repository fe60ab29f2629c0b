"""Prototype-based evidence model.

Each mixture component of a slide embedding is mapped to a GRFN by combining
the evidence of trainable component prototypes: a prototype contributes a
GRFN whose location is an affine function of the flattened component
embedding, discounted by a cosine-similarity weight between the component
mean and the prototype anchor.  The slide-level evidence is the mixture of
the per-component GRFNs under the fitted component weights.

A PrototypeBank is immutable during inference; evaluating many slides
against one bank concurrently is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import grfn
from .gmm import SlideEmbedding
from .grfn import GRFN, Interval, MixtureGRFN

__all__ = [
    "ComponentPrototype",
    "DegenerateEmbeddingError",
    "PrototypeBank",
    "component_evidence",
    "prototype_evidence",
    "pst",
    "relative_risk",
    "risk_score",
    "similarity",
    "slide_evidence",
    "summarizing_grfn",
    "survival_function",
]


class DegenerateEmbeddingError(ValueError):
    """A zero-norm vector reached a cosine-similarity computation."""


# Similarity exponents are capped so s stays in (0, 1] as a normal positive
# float; without the cap, large decay parameters underflow every prototype of
# a component to zero, leaving no combinable evidence, and cubes of the
# combined precision underflow inside gradient computations.
SIMILARITY_EXPONENT_CAP = 60.0


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def inv_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus output must be positive")
    return y + math.log(-math.expm1(-y))


@dataclass(frozen=True)
class ComponentPrototype:
    """Trainable evidence source for one mixture component.

    ``log_var`` and ``raw_h`` are unconstrained; the GRFN variance is
    exp(log_var) and the precision softplus(raw_h), keeping both positive
    under gradient updates.  ``gamma`` enters the similarity as gamma**2.
    """

    anchor: np.ndarray  # (d,)
    coeffs: np.ndarray  # (2d + 1,)
    intercept: float
    log_var: float
    raw_h: float
    gamma: float

    def __post_init__(self) -> None:
        a = np.asarray(self.anchor, dtype=np.float64)
        b = np.asarray(self.coeffs, dtype=np.float64)
        if a.ndim != 1 or b.ndim != 1 or b.size != 2 * a.size + 1:
            raise ValueError("coeffs must have length 2 * len(anchor) + 1")
        if np.linalg.norm(a) <= 0.0:
            raise ValueError("anchor must be a nonzero vector")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "coeffs", b)

    @property
    def sigma2(self) -> float:
        return math.exp(self.log_var)

    @property
    def h(self) -> float:
        return softplus(self.raw_h)


@dataclass(frozen=True)
class PrototypeBank:
    """Per-component prototype lists plus the belief/plausibility mixing
    weight lambda_mix used by the survival function."""

    components: tuple[tuple[ComponentPrototype, ...], ...]
    lambda_mix: float = 0.1

    def __init__(
        self,
        components: Sequence[Sequence[ComponentPrototype]],
        lambda_mix: float = 0.1,
    ) -> None:
        comps = tuple(tuple(protos) for protos in components)
        if len(comps) < 1 or any(len(p) < 1 for p in comps):
            raise ValueError("every component needs at least one prototype")
        if not 0.0 <= lambda_mix <= 1.0:
            raise ValueError(f"lambda_mix must lie in [0, 1], got {lambda_mix}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "lambda_mix", float(lambda_mix))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0][0].anchor.size


def similarity(mean_c: np.ndarray, proto: ComponentPrototype) -> float:
    """exp(-gamma^2 * d_cos) with d_cos the cosine distance (1 - cos)/2
    between the component mean and the prototype anchor; 1 for positively
    collinear vectors, decaying toward exp(-gamma^2) for antiparallel ones."""
    v = np.asarray(mean_c, dtype=np.float64)
    nv = np.linalg.norm(v)
    na = np.linalg.norm(proto.anchor)
    if nv <= 0.0 or na <= 0.0:
        raise DegenerateEmbeddingError("cosine similarity needs nonzero vectors")
    cos = float(np.clip(v @ proto.anchor / (nv * na), -1.0, 1.0))
    return math.exp(-min(proto.gamma**2 * 0.5 * (1.0 - cos), SIMILARITY_EXPONENT_CAP))


def prototype_evidence(z_c: np.ndarray, proto: ComponentPrototype) -> GRFN:
    """GRFN contributed by one prototype for a flattened component embedding:
    location coeffs . z + intercept, variance exp(log_var), precision
    softplus(raw_h)."""
    z = np.asarray(z_c, dtype=np.float64)
    if z.shape != proto.coeffs.shape:
        raise ValueError(
            f"embedding length {z.shape} does not match coefficients "
            f"{proto.coeffs.shape}"
        )
    return GRFN(float(proto.coeffs @ z + proto.intercept), proto.sigma2, proto.h)


def component_evidence(
    embedding_c: tuple[float, np.ndarray, np.ndarray],
    protos: Sequence[ComponentPrototype],
) -> GRFN:
    """Combine all prototype GRFNs of one component, each discounted by its
    similarity to the component mean."""
    if len(protos) == 0:
        raise ValueError("component needs at least one prototype")
    weight, mean, var = embedding_c
    z = np.concatenate(([weight], np.asarray(mean), np.asarray(var)))
    items = [(similarity(mean, p), prototype_evidence(z, p)) for p in protos]
    return grfn.combine(items)


def slide_evidence(emb: SlideEmbedding, bank: PrototypeBank) -> MixtureGRFN:
    """Mixture of per-component evidence GRFNs under the slide's component
    weights."""
    if emb.n_components != bank.n_components:
        raise ValueError(
            f"embedding has {emb.n_components} components, bank has "
            f"{bank.n_components}"
        )
    comps = [
        component_evidence(emb.component(c), bank.components[c])
        for c in range(emb.n_components)
    ]
    return MixtureGRFN(emb.weights, comps)


def survival_function(m: MixtureGRFN, t: float, lambda_mix: float) -> float:
    """Survival estimate at time t > 0: a lambda-blend of the mixture belief
    (lower bound) and plausibility (upper bound) of [log t, inf)."""
    if not t > 0.0:
        raise ValueError(f"time must be positive, got {t}")
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError(f"lambda_mix must lie in [0, 1], got {lambda_mix}")
    ray = Interval(math.log(t), math.inf)
    bel = grfn.mixture_bel(m, ray)
    pl = grfn.mixture_pl(m, ray)
    return lambda_mix * bel + (1.0 - lambda_mix) * pl


def pst(g: GRFN) -> float:
    """Most plausible survival time: exp of the location (log-time units)."""
    return math.exp(g.mu)


def relative_risk(m: MixtureGRFN) -> np.ndarray:
    """Min-max inverted component locations: 1 for the earliest plausible
    survival (highest risk), 0 for the latest; all 0.5 when the locations
    are indistinguishable."""
    mus = np.array([g.mu for g in m.components])
    spread = mus.max() - mus.min()
    if spread < 1e-12:
        return np.full(mus.size, 0.5)
    return 1.0 - (mus - mus.min()) / spread


def risk_score(m: MixtureGRFN) -> float:
    """Scalar risk for ranking: negative weight-averaged location (negative
    expected plausible log survival time)."""
    return -math.fsum(w * g.mu for w, g in zip(m.weights, m.components))


def summarizing_grfn(m: MixtureGRFN) -> GRFN:
    """Pool mixture components into a single GRFN by the combination rule
    with the mixture weights as similarities; used for per-subject
    prediction intervals, which are defined on a single GRFN."""
    return grfn.combine(list(zip(m.weights, m.components)))
