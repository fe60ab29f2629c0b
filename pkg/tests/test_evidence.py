import math

import numpy as np
import pytest

from dpsurv.evidence import (
    ComponentPrototype,
    DegenerateEmbeddingError,
    PrototypeBank,
    component_evidence,
    prototype_evidence,
    pst,
    relative_risk,
    risk_score,
    similarity,
    slide_evidence,
    summarizing_grfn,
    survival_function,
)
from dpsurv.gmm import SlideEmbedding
from dpsurv.grfn import GRFN, Interval, MixtureGRFN, combine, mixture_bel, mixture_pl


def make_proto(dim=3, gamma=1.0, intercept=0.0, coeffs=None, anchor=None,
               log_var=0.0, raw_h=0.5):
    if anchor is None:
        anchor = np.ones(dim)
    if coeffs is None:
        coeffs = np.zeros(2 * dim + 1)
    return ComponentPrototype(
        anchor=np.asarray(anchor, dtype=float),
        coeffs=np.asarray(coeffs, dtype=float),
        intercept=intercept,
        log_var=log_var,
        raw_h=raw_h,
        gamma=gamma,
    )


def make_embedding(weights, means, variances=None):
    means = np.asarray(means, dtype=float)
    if variances is None:
        variances = np.ones_like(means)
    return SlideEmbedding(
        weights=np.asarray(weights, dtype=float),
        means=means,
        variances=np.asarray(variances, dtype=float),
    )


class TestSimilarity:
    def test_identical_vectors(self):
        p = make_proto(anchor=[1.0, 2.0, 3.0], gamma=4.2)
        assert similarity(np.array([1.0, 2.0, 3.0]), p) == 1.0

    def test_antiparallel(self):
        p = make_proto(anchor=[1.0, 0.0, 0.0], gamma=1.0)
        assert similarity(np.array([-1.0, 0.0, 0.0]), p) == pytest.approx(
            math.exp(-1), abs=1e-12
        )

    def test_orthogonal(self):
        p = make_proto(anchor=[1.0, 0.0, 0.0], gamma=2.0)
        assert similarity(np.array([0.0, 1.0, 0.0]), p) == pytest.approx(
            math.exp(-2), abs=1e-12
        )

    def test_scale_invariance(self):
        p = make_proto(anchor=[0.3, -0.7, 1.1], gamma=1.7)
        v = np.array([0.5, 0.1, -0.4])
        assert similarity(v, p) == pytest.approx(similarity(17.3 * v, p), abs=1e-12)

    def test_zero_norm_rejected(self):
        p = make_proto()
        with pytest.raises(DegenerateEmbeddingError):
            similarity(np.zeros(3), p)

    def test_stays_positive_for_large_gamma(self):
        p = make_proto(anchor=[1.0, 0.0, 0.0], gamma=1e4)
        s = similarity(np.array([-1.0, 0.0, 0.0]), p)
        assert 0.0 < s <= 1.0


class TestPrototypeEvidence:
    def test_constant_regression(self):
        p = make_proto(intercept=2.0)
        g = prototype_evidence(np.arange(7.0), p)
        assert g.mu == 2.0
        assert g.sigma2 == pytest.approx(1.0)
        assert g.h == pytest.approx(math.log1p(math.exp(0.5)))

    def test_linearity(self):
        coeffs = np.arange(7.0) / 10
        p = make_proto(coeffs=coeffs, intercept=0.5)
        z = np.linspace(-1, 1, 7)
        g1 = prototype_evidence(z, p)
        g2 = prototype_evidence(2 * z, p)
        assert g2.mu - 0.5 == pytest.approx(2 * (g1.mu - 0.5), abs=1e-12)

    def test_dot_product_oracle(self):
        rng = np.random.default_rng(4)
        coeffs = rng.normal(size=7)
        z = rng.normal(size=7)
        p = make_proto(coeffs=coeffs, intercept=-0.3)
        expected = sum(c * v for c, v in zip(coeffs, z)) - 0.3
        assert prototype_evidence(z, p).mu == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            prototype_evidence(np.zeros(5), make_proto(dim=3))


class TestComponentEvidence:
    def test_single_prototype_scales_h_only(self):
        p = make_proto(anchor=[1.0, 0.0, 0.0], gamma=1.5, intercept=1.0, raw_h=2.0)
        mean = np.array([0.0, 1.0, 0.0])  # orthogonal: s = exp(-1.5^2 * 0.5)
        g = component_evidence((0.5, mean, np.ones(3)), [p])
        s = math.exp(-(1.5**2) * 0.5)
        assert g.h == pytest.approx(s * p.h, abs=1e-12)
        assert g.mu == pytest.approx(1.0, abs=1e-12)
        assert g.sigma2 == pytest.approx(p.sigma2, abs=1e-12)

    def test_negligible_prototype_continuity(self):
        keep = make_proto(anchor=[1.0, 0.0, 0.0], gamma=1.0, intercept=0.3)
        drop = make_proto(anchor=[-1.0, 0.0, 0.0], gamma=200.0, intercept=9.9)
        mean = np.array([1.0, 0.0, 0.0])
        both = component_evidence((0.4, mean, np.ones(3)), [keep, drop])
        alone = component_evidence((0.4, mean, np.ones(3)), [keep])
        assert both.mu == pytest.approx(alone.mu, abs=1e-9)
        assert both.sigma2 == pytest.approx(alone.sigma2, abs=1e-9)
        assert both.h == pytest.approx(alone.h, abs=1e-9)

    def test_identical_prototypes_at_full_similarity(self):
        p = make_proto(anchor=[1.0, 1.0, 1.0], intercept=0.7, raw_h=1.3)
        mean = np.array([2.0, 2.0, 2.0])  # collinear: s = 1
        g = component_evidence((0.2, mean, np.ones(3)), [p, p, p])
        assert g.mu == pytest.approx(0.7, abs=1e-12)
        assert g.h == pytest.approx(3 * p.h, abs=1e-12)
        assert g.sigma2 == pytest.approx(p.sigma2 / 3, abs=1e-12)


class TestSlideEvidence:
    def make_bank(self, dim=2, lambda_mix=0.1):
        protos = [
            [make_proto(dim=dim, anchor=np.ones(dim), intercept=0.5, gamma=0.5)],
            [make_proto(dim=dim, anchor=-np.ones(dim), intercept=-0.5, gamma=0.5)],
        ]
        return PrototypeBank(protos, lambda_mix=lambda_mix)

    def test_single_component(self):
        bank = PrototypeBank([[make_proto(dim=2)]])
        emb = make_embedding([1.0], [[1.0, 2.0]])
        m = slide_evidence(emb, bank)
        assert m.weights == (1.0,)
        assert len(m.components) == 1

    def test_permutation_symmetry(self):
        bank = self.make_bank()
        emb = make_embedding([0.3, 0.7], [[1.0, 0.5], [-0.5, -1.0]])
        swapped_bank = PrototypeBank(
            [bank.components[1], bank.components[0]], lambda_mix=bank.lambda_mix
        )
        swapped_emb = make_embedding([0.7, 0.3], [[-0.5, -1.0], [1.0, 0.5]])
        ray = Interval(0.2, math.inf)
        a = mixture_bel(slide_evidence(emb, bank), ray)
        b = mixture_bel(slide_evidence(swapped_emb, swapped_bank), ray)
        assert a == pytest.approx(b, abs=1e-14)

    def test_mixture_linearity_oracle(self):
        bank = self.make_bank()
        emb = make_embedding([0.4, 0.6], [[1.0, 0.5], [-0.5, -1.0]])
        m = slide_evidence(emb, bank)
        ray = Interval(0.0, math.inf)
        per_comp = [
            component_evidence(emb.component(c), bank.components[c]) for c in range(2)
        ]
        expected = 0.4 * mixture_bel(MixtureGRFN([1.0], [per_comp[0]]), ray)
        expected += 0.6 * mixture_bel(MixtureGRFN([1.0], [per_comp[1]]), ray)
        assert mixture_bel(m, ray) == pytest.approx(expected, abs=1e-12)

    def test_component_count_mismatch(self):
        bank = self.make_bank()
        with pytest.raises(ValueError):
            slide_evidence(make_embedding([1.0], [[1.0, 1.0]]), bank)


class TestSurvivalFunction:
    def test_lambda_extremes(self):
        m = MixtureGRFN([0.5, 0.5], [GRFN(0, 1, 2), GRFN(1, 0.5, 1)])
        ray = Interval(math.log(2.0), math.inf)
        assert survival_function(m, 2.0, 1.0) == pytest.approx(
            mixture_bel(m, ray), abs=1e-15
        )
        assert survival_function(m, 2.0, 0.0) == pytest.approx(
            mixture_pl(m, ray), abs=1e-15
        )

    def test_limit_at_zero(self):
        m = MixtureGRFN([0.6, 0.4], [GRFN(0.5, 1, 2), GRFN(-0.5, 0.3, 1)])
        assert survival_function(m, 1e-30, 0.5) == pytest.approx(1.0, abs=1e-9)

    def test_gaussian_median(self):
        m = MixtureGRFN([1.0], [GRFN(0, 1, 1e8)])
        assert survival_function(m, 1.0, 0.5) == pytest.approx(0.5, abs=1e-3)

    def test_monotone_and_sandwiched(self):
        rng = np.random.default_rng(8)
        comps = [
            GRFN(rng.uniform(-1, 1), rng.uniform(0.1, 2), rng.uniform(0.1, 5))
            for _ in range(3)
        ]
        w = rng.dirichlet(np.ones(3))
        m = MixtureGRFN(w, comps)
        ts = np.logspace(-3, 3, 100)
        vals = [survival_function(m, t, 0.3) for t in ts]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
        for t in ts[::10]:
            ray = Interval(math.log(t), math.inf)
            assert mixture_bel(m, ray) - 1e-12 <= survival_function(m, t, 0.3)
            assert survival_function(m, t, 0.3) <= mixture_pl(m, ray) + 1e-12

    def test_rejects_nonpositive_time(self):
        m = MixtureGRFN([1.0], [GRFN(0, 1, 1)])
        with pytest.raises(ValueError):
            survival_function(m, 0.0, 0.5)
        with pytest.raises(ValueError):
            survival_function(m, -1.0, 0.5)


class TestInterpretation:
    def test_pst(self):
        assert pst(GRFN(0, 1, 1)) == 1.0
        assert pst(GRFN(math.log(730), 1, 1)) == pytest.approx(730, abs=1e-9)

    def test_pst_ordering(self):
        mus = [0.1, -0.5, 2.0]
        psts = [pst(GRFN(mu, 1, 1)) for mu in mus]
        assert np.argsort(psts).tolist() == np.argsort(mus).tolist()

    def test_relative_risk_direct(self):
        m = MixtureGRFN(
            [1 / 3, 1 / 3, 1 / 3], [GRFN(1, 1, 1), GRFN(2, 1, 1), GRFN(3, 1, 1)]
        )
        assert relative_risk(m).tolist() == [1.0, 0.5, 0.0]

    def test_relative_risk_degenerate(self):
        m = MixtureGRFN([0.5, 0.5], [GRFN(1, 1, 1), GRFN(1, 2, 3)])
        assert relative_risk(m).tolist() == [0.5, 0.5]

    def test_relative_risk_shift_invariance(self):
        mus = [0.3, -1.2, 0.9]
        m1 = MixtureGRFN([0.2, 0.5, 0.3], [GRFN(mu, 1, 1) for mu in mus])
        m2 = MixtureGRFN([0.2, 0.5, 0.3], [GRFN(mu + 5.5, 1, 1) for mu in mus])
        assert np.allclose(relative_risk(m1), relative_risk(m2), atol=1e-12)

    def test_risk_score(self):
        m = MixtureGRFN([0.25, 0.75], [GRFN(2, 1, 1), GRFN(-1, 1, 1)])
        assert risk_score(m) == pytest.approx(-(0.25 * 2 + 0.75 * -1), abs=1e-15)

    def test_summarizing_grfn_matches_combine(self):
        m = MixtureGRFN([0.25, 0.75], [GRFN(2, 1, 1), GRFN(-1, 0.5, 2)])
        pooled = summarizing_grfn(m)
        assert pooled == combine([(0.25, m.components[0]), (0.75, m.components[1])])


class TestPrototypeBankValidation:
    def test_empty_component_rejected(self):
        with pytest.raises(ValueError):
            PrototypeBank([[make_proto()], []])

    def test_lambda_bounds(self):
        with pytest.raises(ValueError):
            PrototypeBank([[make_proto()]], lambda_mix=1.5)

    def test_zero_anchor_rejected(self):
        with pytest.raises(ValueError):
            make_proto(anchor=[0.0, 0.0, 0.0])
