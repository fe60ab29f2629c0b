import math

import numpy as np
import pytest
from scipy.special import ndtr

from dpsurv.evidence import ComponentPrototype, PrototypeBank, inv_softplus
from dpsurv.gmm import SlideEmbedding
from dpsurv.training import (
    BinGrid,
    SurvivalRecord,
    TrainConfig,
    bank_from_parameters,
    bank_parameters,
    central_difference,
    grad_check,
    init_bank,
    mixture_evidential_loss,
    nll_subject,
    nll_uncensored,
    quantile_bins,
    train,
)


def random_problem(seed=0, n=16, n_comp=2, dim=3, censor_rate=0.25):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        emb = SlideEmbedding(
            weights=rng.dirichlet(np.ones(n_comp)),
            means=rng.normal(0, 1, (n_comp, dim)),
            variances=rng.uniform(0.2, 1.5, (n_comp, dim)),
        )
        rec = SurvivalRecord(
            subject_id=f"s{i}",
            time=float(np.exp(rng.normal(0, 0.5))),
            censored=bool(rng.random() < censor_rate),
        )
        pairs.append((emb, rec))
    if all(r.censored for _, r in pairs):
        emb, rec = pairs[0]
        pairs[0] = (emb, SurvivalRecord(rec.subject_id, rec.time, False))
    return pairs


class TestSurvivalRecord:
    def test_positive_time_required(self):
        with pytest.raises(ValueError):
            SurvivalRecord("a", 0.0, False)
        with pytest.raises(ValueError):
            SurvivalRecord("a", math.inf, False)


class TestQuantileBins:
    def test_hand_quantiles(self):
        recs = [SurvivalRecord(str(t), t, False) for t in (1.0, 2.0, 3.0, 4.0)]
        grid = quantile_bins(recs, 2)
        assert grid.edges[0] == 0.0
        assert grid.edges[1] == pytest.approx(2.5)
        counts = [0, 0]
        for r in recs:
            counts[grid.bin_index(r.time)] += 1
        assert counts == [2, 2]

    def test_single_bin(self):
        recs = [SurvivalRecord("a", 2.0, False)]
        grid = quantile_bins(recs, 1)
        assert grid.n_bins == 1
        assert grid.bin_index(1e9) == 0

    def test_all_censored_rejected(self):
        recs = [SurvivalRecord("a", 1.0, True), SurvivalRecord("b", 2.0, True)]
        with pytest.raises(ValueError):
            quantile_bins(recs, 1)

    def test_balanced_counts(self):
        rng = np.random.default_rng(17)
        recs = [
            SurvivalRecord(str(i), float(np.exp(rng.normal())), False)
            for i in range(103)
        ]
        for n_bins in (2, 4, 5):
            grid = quantile_bins(recs, n_bins)
            counts = np.zeros(n_bins, dtype=int)
            for r in recs:
                counts[grid.bin_index(r.time)] += 1
            assert counts.sum() == 103
            assert counts.max() - counts.min() <= 1

    def test_too_few_distinct(self):
        recs = [SurvivalRecord(str(i), 2.0, False) for i in range(10)]
        with pytest.raises(ValueError):
            quantile_bins(recs, 2)

    def test_time_exactly_on_edge_joins_right_bin(self):
        grid = BinGrid(edges=np.array([0.0, 1.0, 2.0, 4.0]))
        assert grid.bin_index(1.0) == 1  # half-open [T_j, T_{j+1})
        assert grid.bin_index(0.999999) == 0
        assert grid.bin_index(4.0) == 2  # beyond the last edge: last bin
        assert grid.bin_index(100.0) == 2


class TestNLL:
    grid = BinGrid(edges=np.array([0.0, 1.0, 2.0, 4.0]))

    def test_perfect_mass(self):
        rec = SurvivalRecord("a", 1.5, False)
        s = {1.0: 1.0, 2.0: 0.0}
        assert nll_uncensored(lambda t: s[t], rec, self.grid) == 0.0

    def test_log_identity(self):
        rec = SurvivalRecord("a", 1.5, False)
        s = {1.0: 0.9, 2.0: 0.9 - 1 / math.e}
        assert nll_uncensored(lambda t: s[t], rec, self.grid) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_censored_contributes_zero_to_uncensored_term(self):
        rec = SurvivalRecord("a", 1.5, True)
        assert nll_uncensored(lambda t: 0.5, rec, self.grid) == 0.0

    def test_censored_subject_terms(self):
        rec = SurvivalRecord("a", 1.5, True)
        assert nll_subject(lambda t: 1.0, rec, self.grid) == 0.0
        assert nll_subject(lambda t: 1 / math.e, rec, self.grid) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_uncensored_subject_equals_uncensored_nll(self):
        rec = SurvivalRecord("a", 0.5, False)
        surv = lambda t: max(0.0, 1 - t / 5)  # noqa: E731
        assert nll_subject(surv, rec, self.grid) == nll_uncensored(
            surv, rec, self.grid
        )

    def test_floor_prevents_infinity(self):
        rec = SurvivalRecord("a", 0.5, False)
        val = nll_uncensored(lambda t: 1.0, rec, self.grid)  # zero mass in bin
        assert val == pytest.approx(-math.log(1e-12), abs=1e-9)

    def test_last_bin_conventions(self):
        rec = SurvivalRecord("a", 3.5, False)
        # uncensored in the last bin: right edge counts as survival 0
        assert nll_uncensored(lambda t: 0.25, rec, self.grid) == pytest.approx(
            -math.log(0.25), abs=1e-12
        )
        # censored in the last bin: evaluated at the finite last edge
        seen = []
        rec_c = SurvivalRecord("a", 3.5, True)
        def surv(t):
            seen.append(t)
            return 0.5
        assert nll_subject(surv, rec_c, self.grid) == pytest.approx(
            -math.log(0.5), abs=1e-12
        )
        assert seen == [4.0]


def spreadsheet_loss(alpha, xi, rho, lam):
    """Independent arithmetic for a two-subject, one-component, one-prototype
    instance; every survival value is written out from the closed forms."""
    sigma2, h_proto, gamma, b0 = 0.36, 2.0, 1.5, 0.2
    edges = [0.0, 1.5, 3.0]

    def surv(t, s):
        h = s * h_proto
        q = 1 + h * sigma2
        x = math.log(t)
        pl = math.exp(-h * (x - b0) ** 2 / (2 * q)) / math.sqrt(q)
        upper = 1 - ndtr((x - b0) / math.sqrt(sigma2)) + pl * ndtr(
            (x - b0) / math.sqrt(sigma2 * q)
        )
        return lam * (upper - pl) + (1 - lam) * upper

    s1 = 1.0  # mean collinear with anchor
    cos = 1 / math.sqrt(2)
    s2 = math.exp(-(gamma**2) * 0.5 * (1 - cos))
    l1 = -math.log(1.0 - surv(edges[1], s1))  # uncensored, first bin
    l2 = -math.log(surv(edges[2], s2))  # censored, last bin
    data = ((1 - alpha) * l1 + alpha * l1 + (1 - alpha) * l2) / 2
    return data + xi * h_proto + rho * gamma**2


class TestMixtureEvidentialLoss:
    def make_instance(self):
        proto = ComponentPrototype(
            anchor=np.array([1.0, 1.0]),
            coeffs=np.zeros(5),
            intercept=0.2,
            log_var=math.log(0.36),
            raw_h=inv_softplus(2.0),
            gamma=1.5,
        )
        bank = PrototypeBank([[proto]], lambda_mix=0.1)
        emb1 = SlideEmbedding(
            weights=np.array([1.0]), means=np.array([[2.0, 2.0]]),
            variances=np.ones((1, 2)),
        )
        emb2 = SlideEmbedding(
            weights=np.array([1.0]), means=np.array([[1.0, 0.0]]),
            variances=np.ones((1, 2)),
        )
        batch = [
            (emb1, SurvivalRecord("a", 1.0, False)),
            (emb2, SurvivalRecord("b", 2.5, True)),
        ]
        grid = BinGrid(edges=np.array([0.0, 1.5, 3.0]))
        return batch, bank, grid

    def test_matches_spreadsheet(self):
        batch, bank, grid = self.make_instance()
        cfg = TrainConfig(alpha=0.3, xi=0.02, rho=0.05)
        got = mixture_evidential_loss(batch, bank, grid, cfg)
        assert got == pytest.approx(
            spreadsheet_loss(0.3, 0.02, 0.05, 0.1), abs=1e-9
        )

    def test_alpha_one_reduces_to_uncensored(self):
        batch, bank, grid = self.make_instance()
        cfg = TrainConfig(alpha=1.0, xi=0.0, rho=0.0)
        got = mixture_evidential_loss(batch, bank, grid, cfg)
        assert got == pytest.approx(spreadsheet_loss(1.0, 0.0, 0.0, 0.1), abs=1e-9)

    def test_zero_penalties(self):
        batch, bank, grid = self.make_instance()
        cfg = TrainConfig(alpha=0.5, xi=0.0, rho=0.0)
        with_pen = mixture_evidential_loss(
            batch, bank, grid, TrainConfig(alpha=0.5, xi=0.02, rho=0.03)
        )
        without = mixture_evidential_loss(batch, bank, grid, cfg)
        assert with_pen - without == pytest.approx(
            0.02 * 2.0 + 0.03 * 1.5**2, abs=1e-12
        )

    def test_decomposition(self):
        from dpsurv.evidence import slide_evidence, survival_function

        pairs = random_problem(seed=3, n=12)
        cfg = TrainConfig(alpha=0.4, xi=0.01, rho=0.02, seed=5, n_prototypes=2)
        grid = quantile_bins([r for _, r in pairs], 3)
        bank = init_bank(pairs, cfg)
        total = mixture_evidential_loss(pairs, bank, grid, cfg)
        l_all, l_unc = [], []
        for emb, rec in pairs:
            m = slide_evidence(emb, bank)
            surv = lambda t, m=m: survival_function(m, t, bank.lambda_mix)  # noqa: E731
            l_all.append(nll_subject(surv, rec, grid))
            l_unc.append(nll_uncensored(surv, rec, grid))
        protos = [p for comp in bank.components for p in comp]
        expected = (
            (1 - cfg.alpha) * np.mean(l_all)
            + cfg.alpha * np.mean(l_unc)
            + cfg.xi * np.mean([p.h for p in protos])
            + cfg.rho * np.mean([p.gamma**2 for p in protos])
        )
        assert total == pytest.approx(expected, abs=1e-9)

    def test_engine_agrees_with_reference(self):
        from dpsurv import _engine
        from dpsurv.training import bank_parameters

        pairs = random_problem(seed=9, n=20, n_comp=3)
        cfg = TrainConfig(seed=2, n_prototypes=2)
        grid = quantile_bins([r for _, r in pairs], cfg.bins)
        bank = init_bank(pairs, cfg)
        ref = mixture_evidential_loss(pairs, bank, grid, cfg)
        eng = _engine.loss_value(bank_parameters(bank), pairs, grid, cfg, bank.lambda_mix)
        assert eng == pytest.approx(ref, abs=1e-9)


class TestInitBank:
    def constant_time_pairs(self, t=5.0, n=10, n_comp=1):
        rng = np.random.default_rng(4)
        pairs = []
        for i in range(n):
            emb = SlideEmbedding(
                weights=np.ones(n_comp) / n_comp,
                means=rng.normal(0, 1, (n_comp, 3)),
                variances=np.ones((n_comp, 3)),
            )
            pairs.append((emb, SurvivalRecord(f"s{i}", t, False)))
        return pairs

    def test_constant_times(self):
        pairs = self.constant_time_pairs(t=5.0)
        bank = init_bank(pairs, TrainConfig(n_prototypes=2, seed=1))
        for protos in bank.components:
            for p in protos:
                assert p.intercept == pytest.approx(math.log(5.0), abs=1e-12)
                assert p.sigma2 == pytest.approx(1e-4, abs=1e-15)

    def test_full_weight_gives_precision_four(self):
        pairs = self.constant_time_pairs(n_comp=1)  # single component: weight 1
        bank = init_bank(pairs, TrainConfig(n_prototypes=1, seed=1))
        assert bank.components[0][0].h == pytest.approx(4.0, abs=1e-9)

    def test_single_cluster_anchor_is_weighted_mean_direction(self):
        rng = np.random.default_rng(6)
        pairs = []
        for i in range(8):
            emb = SlideEmbedding(
                weights=np.array([0.25, 0.75]),
                means=rng.normal(0, 1, (2, 3)),
                variances=np.ones((2, 3)),
            )
            pairs.append((emb, SurvivalRecord(f"s{i}", 1.0 + i, False)))
        cfg = TrainConfig(n_prototypes=1, seed=2, tau=0.0)
        bank = init_bank(pairs, cfg)
        for c in range(2):
            feats = np.stack([emb.means[c] for emb, _ in pairs])
            feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
            w = np.array([emb.weights[c] for emb, _ in pairs])
            expected = (feats * w[:, None]).sum(axis=0) / w.sum()
            assert np.allclose(bank.components[c][0].anchor, expected, atol=1e-9)

    def test_deterministic(self):
        pairs = random_problem(seed=12)
        cfg = TrainConfig(n_prototypes=2, seed=3)
        a, b = init_bank(pairs, cfg), init_bank(pairs, cfg)
        pa, pb = bank_parameters(a), bank_parameters(b)
        for blk_a, blk_b in zip(pa, pb):
            for key in blk_a:
                assert np.array_equal(blk_a[key], blk_b[key])

    def test_per_component_prototype_counts(self):
        pairs = random_problem(seed=13, n=20, n_comp=2)
        bank = init_bank(pairs, TrainConfig(n_prototypes=(1, 3), seed=4))
        assert [len(c) for c in bank.components] == [1, 3]
        with pytest.raises(ValueError):
            init_bank(pairs, TrainConfig(n_prototypes=(1, 2, 3), seed=4))


class TestTrain:
    def test_zero_learning_rate_is_identity(self):
        pairs = random_problem(seed=20)
        cfg = TrainConfig(seed=1, epochs=3, batch_size=4, learning_rate=0.0)
        bank0 = init_bank(pairs, cfg)
        bank, _ = train(pairs, [], cfg, init=bank0)
        for blk_a, blk_b in zip(bank_parameters(bank0), bank_parameters(bank)):
            for key in blk_a:
                assert np.array_equal(blk_a[key], blk_b[key])

    def test_zero_epochs_returns_init(self):
        pairs = random_problem(seed=21)
        cfg = TrainConfig(seed=1, epochs=0)
        bank0 = init_bank(pairs, cfg)
        bank, rows = train(pairs, [], cfg, init=bank0)
        assert rows == []
        for blk_a, blk_b in zip(bank_parameters(bank0), bank_parameters(bank)):
            for key in blk_a:
                assert np.array_equal(blk_a[key], blk_b[key])

    def test_toy_loss_decreases(self):
        rng = np.random.default_rng(30)
        pairs = [
            (
                SlideEmbedding(
                    weights=np.array([1.0]),
                    means=rng.normal(0, 1, (1, 3)),
                    variances=np.ones((1, 3)),
                ),
                SurvivalRecord(sid, t, False),
            )
            for sid, t in (("a", 2.0), ("b", 0.5))
        ]
        cfg = TrainConfig(
            seed=2, epochs=10, batch_size=2, learning_rate=5e-3,
            n_prototypes=1, bins=2, xi=0.0, rho=0.0,
        )
        _, rows = train(pairs, [], cfg)
        losses = [r.train_loss for r in rows]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_seed_reproducibility(self):
        pairs = random_problem(seed=22)
        cfg = TrainConfig(seed=5, epochs=4, batch_size=8, learning_rate=1e-3)
        bank_a, rows_a = train(pairs, [], cfg)
        bank_b, rows_b = train(pairs, [], cfg)
        for blk_a, blk_b in zip(bank_parameters(bank_a), bank_parameters(bank_b)):
            for key in blk_a:
                assert np.array_equal(blk_a[key], blk_b[key])
        assert [(r.epoch, r.train_loss, r.val_loss) for r in rows_a] == [
            (r.epoch, r.train_loss, r.val_loss) for r in rows_b
        ]

    def test_validation_selects_best(self):
        pairs = random_problem(seed=23, n=24)
        cfg = TrainConfig(seed=6, epochs=5, batch_size=8, learning_rate=1e-3)
        bank, rows = train(pairs[:16], pairs[16:], cfg)
        assert all(r.val_loss is not None for r in rows)


class TestGradCheck:
    def test_central_difference_quadratic(self):
        fd = central_difference(lambda p: p * p, 3.0, 1e-5)
        assert abs(fd - 6.0) / 6.0 <= 1e-8

    def test_random_toy_below_threshold(self):
        pairs = random_problem(seed=31, n=8)
        cfg = TrainConfig(seed=7, n_prototypes=2)
        grid = quantile_bins([r for _, r in pairs], cfg.bins)
        bank = init_bank(pairs, cfg)
        assert grad_check(bank, pairs, grid, cfg) <= 1e-4

    def test_eps_halving_behaviour(self):
        pairs = random_problem(seed=32, n=6)
        cfg = TrainConfig(seed=8, n_prototypes=1)
        grid = quantile_bins([r for _, r in pairs], cfg.bins)
        bank = init_bank(pairs, cfg)
        err = grad_check(bank, pairs, grid, cfg, eps=1e-5)
        err_half = grad_check(bank, pairs, grid, cfg, eps=5e-6)
        assert err_half <= 4 * err + 1e-10

    def test_bank_parameter_round_trip(self):
        pairs = random_problem(seed=33)
        bank = init_bank(pairs, TrainConfig(n_prototypes=2, seed=9))
        rebuilt = bank_from_parameters(bank_parameters(bank), bank.lambda_mix)
        for blk_a, blk_b in zip(bank_parameters(bank), bank_parameters(rebuilt)):
            for key in blk_a:
                assert np.array_equal(blk_a[key], blk_b[key])
