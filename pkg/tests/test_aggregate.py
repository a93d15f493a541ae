import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsemi import tensor_net as tn
from fedsemi.aggregate import (
    ClientUpdate,
    SimilarityReport,
    aggregate_round,
    build_anchor_dictionary,
    compute_similarity_report,
    fedavg_semi_weights,
    fedavg_weights,
    normalize_rows,
    pseudo_aware_similarity,
    round_record_json,
    semianagg_weights,
    weighted_average,
)
from fedsemi.data_sim import ClientDataset, gen_gaussian_mixture
from fedsemi.errors import AggregationError, AlignmentError
from fedsemi.local_train import ThresholdState
from oracles import brute_force_average, brute_force_semianagg

SCALAR = tn.Architecture((1, 1, 1))


def const_params(v, arch=SCALAR):
    return tn.unflatten(arch, np.full(arch.n_params, float(v)))


def update(cid, value=0.0, n_labeled=0, n_unlabeled=0, n_confident=0, w_hat=None, C=2):
    w_hat = w_hat if w_hat is not None else [None] * C
    counts = [n_confident // max(1, sum(v is not None for v in w_hat)) if v is not None else 0 for v in w_hat]
    rep = SimilarityReport(cid, list(w_hat), counts, n_labeled)
    return ClientUpdate(cid, const_params(value), rep, n_labeled, n_unlabeled, n_confident)


def report(cid, w_hat, counts=None, n_labeled=0):
    counts = counts or [0 if v is None else 10 for v in w_hat]
    return SimilarityReport(cid, list(w_hat), list(counts), n_labeled)


def random_reports(r, K, C):
    reps = []
    for k in range(K):
        kind = r.integers(0, 4)
        w = [None if r.random() < 0.3 else float(r.uniform(-1, 1)) for _ in range(C)]
        if kind == 0:
            w = [None] * C
        counts = [0 if v is None else int(r.integers(1, 50)) for v in w]
        n_lab = int(r.integers(0, 100)) if kind in (0, 1) else 0
        reps.append(SimilarityReport(k, w, counts, n_lab))
    if sum(rep.n_labeled for rep in reps) == 0 and sum(rep.n_confident for rep in reps) == 0:
        reps[0].n_labeled = 5
    return reps


class TestWeightedAverage:
    def test_identical_is_exact(self, rng):
        arch = tn.Architecture((4, 8, 3))
        p = tn.unflatten(arch, rng.normal(size=arch.n_params))
        w = rng.dirichlet(np.ones(5))
        assert weighted_average([p] * 5, w).equals(p)

    def test_scalar_example(self):
        out = weighted_average([const_params(2.0), const_params(4.0)], [0.25, 0.75])
        np.testing.assert_allclose(tn.flatten(out), 3.5, atol=1e-15)

    def test_matches_loop_oracle(self, rng):
        arch = tn.Architecture((4, 8, 3))
        models = [tn.unflatten(arch, rng.normal(size=67)) for _ in range(3)]
        w = rng.dirichlet(np.ones(3))
        got = tn.flatten(weighted_average(models, w))
        ref = brute_force_average([tn.flatten(m).tolist() for m in models], w.tolist())
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("w", [[0.5, 0.6], [1.2, -0.2], [0.5]])
    def test_bad_weights(self, w):
        with pytest.raises(AggregationError):
            weighted_average([const_params(1), const_params(2)], w)


class TestFedAvg:
    def test_sizes(self):
        w = fedavg_weights([update(0, n_labeled=100), update(1, n_unlabeled=300)])
        np.testing.assert_allclose(w.coefficients, [0.25, 0.75])

    def test_equal_sizes(self):
        w = fedavg_weights([update(k, n_unlabeled=50) for k in range(4)])
        np.testing.assert_allclose(w.coefficients, [0.25] * 4)

    def test_single(self):
        assert fedavg_weights([update(3, n_labeled=7)]).coefficients.tolist() == [1.0]

    def test_empty(self):
        with pytest.raises(AggregationError):
            fedavg_weights([update(0), update(1)])


class TestFedAvgSemi:
    def test_hand_example(self):
        ups = [update(0, n_labeled=100), update(1, n_unlabeled=80, n_confident=60),
               update(2, n_unlabeled=90, n_confident=40)]
        w = fedavg_semi_weights(ups, 0.5)
        np.testing.assert_allclose(w.coefficients, [0.5, 0.3, 0.2], rtol=0, atol=1e-9)

    def test_one_labeled_one_unlabeled(self):
        w = fedavg_semi_weights([update(0, n_labeled=7), update(1, n_unlabeled=900, n_confident=811)], 0.5)
        np.testing.assert_allclose(w.coefficients, [0.5, 0.5], atol=1e-15)

    def test_lambda_one_is_labeled_fedavg(self):
        ups = [update(0, n_labeled=120), update(1, n_labeled=30), update(2, n_unlabeled=500, n_confident=400)]
        semi = fedavg_semi_weights(ups, 1.0)
        plain = fedavg_weights(ups[:2])
        assert semi.coefficients[:2].tolist() == plain.coefficients.tolist()
        assert semi.coefficients[2] == 0.0

    def test_no_confident_moves_mass_to_labeled(self):
        w = fedavg_semi_weights([update(0, n_labeled=10), update(1, n_unlabeled=50, n_confident=0)], 0.5)
        assert w.coefficients.tolist() == [1.0, 0.0]
        assert w.lambda_hat_1 == 1.0

    def test_no_labeled_moves_mass_to_unlabeled(self):
        w = fedavg_semi_weights([update(0, n_unlabeled=10, n_confident=10),
                                 update(1, n_unlabeled=50, n_confident=30)], 0.5)
        np.testing.assert_allclose(w.coefficients, [0.25, 0.75])

    def test_both_empty(self):
        with pytest.raises(AggregationError):
            fedavg_semi_weights([update(0, n_unlabeled=5)], 0.5)


class TestSemiAnAgg:
    def test_hand_example(self):
        w = semianagg_weights([report(0, [0.8, 0.6]), report(1, [0.4, 0.8])], 0.5)
        np.testing.assert_allclose(w.r, [[0.2, 0.4], [0.6, 0.2]], atol=1e-12)
        np.testing.assert_allclose(w.r_hat, [[0.25, 2 / 3], [0.75, 1 / 3]], atol=1e-12)
        np.testing.assert_allclose(w.r_hat_k, [11 / 12, 13 / 12], atol=1e-12)
        np.testing.assert_allclose(w.unsup_weights, [11 / 24, 13 / 24], atol=1e-12)
        np.testing.assert_allclose(w.unsup_weights, [0.4583, 0.5417], atol=5e-5)
        # no labeled client: all mass on the unsupervised term
        np.testing.assert_allclose(w.coefficients, w.unsup_weights, atol=1e-15)

    def test_identical_reports_uniform(self):
        w = semianagg_weights([report(k, [0.3, None, 0.9]) for k in range(4)], 0.5)
        np.testing.assert_allclose(w.unsup_weights, [0.25] * 4, atol=1e-15)

    def test_single_unlabeled(self):
        w = semianagg_weights([report(0, [None, None], n_labeled=10), report(1, [0.1, 0.99])], 0.5)
        assert w.unsup_weights.tolist() == [0.0, 1.0]
        np.testing.assert_allclose(w.coefficients, [0.5, 0.5])

    def test_no_data_class_is_excluded_not_zero(self):
        w = semianagg_weights([report(0, [0.5, None]), report(1, [0.5, 0.5])], 0.5)
        # class 1 belongs entirely to client 1, class 0 is split evenly
        np.testing.assert_allclose(w.r_hat_k, [0.5, 1.5])

    def test_anchor_match_triggers_uniform_fallback(self):
        w = semianagg_weights([report(0, [1.0, 1.0]), report(1, [1.0, None]), report(2, [None, None], [0, 0], 9)],
                              0.5)
        assert w.fallback == "uniform_unsupervised"
        np.testing.assert_allclose(w.unsup_weights, [0.5, 0.5, 0.0])
        np.testing.assert_allclose(w.coefficients, [0.25, 0.25, 0.5])

    def test_lower_similarity_gets_more_weight(self):
        w = semianagg_weights([report(0, [0.7, 0.5, 0.9]), report(1, [0.6, 0.4, 0.8])], 0.5)
        assert w.unsup_weights[1] > w.unsup_weights[0]

    def test_oracle_equivalence(self):
        r = np.random.default_rng(2024)
        for _ in range(300):
            K, C = int(r.integers(1, 7)), int(r.integers(1, 9))
            reps = random_reports(r, K, C)
            lam = float(r.uniform())
            got = semianagg_weights(reps, lam)
            coef, unsup = brute_force_semianagg([x.w_hat for x in reps], [x.n_labeled for x in reps],
                                                [x.n_confident for x in reps], lam)
            np.testing.assert_allclose(got.coefficients, coef, rtol=0, atol=1e-12)
            np.testing.assert_allclose(got.unsup_weights, unsup, rtol=0, atol=1e-12)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 8), st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_convex(self, seed, K, C, lam):
        w = semianagg_weights(random_reports(np.random.default_rng(seed), K, C), lam)
        assert np.all(w.coefficients >= 0)
        assert abs(w.coefficients.sum() - 1) <= 1e-9
        assert np.all((w.r_hat >= 0) & (w.r_hat <= 1))
        has_data = w.r_hat.sum(axis=0) > 0
        np.testing.assert_allclose(w.r_hat.sum(axis=0)[has_data], 1.0, atol=1e-12)


class TestAggregateRound:
    def test_identical_models_all_strategies(self, rng):
        arch = tn.Architecture((3, 4, 2))
        p = tn.unflatten(arch, rng.normal(size=arch.n_params))
        ups = [ClientUpdate(k, p, report(k, [0.2 * k, 0.5], n_labeled=10 if k == 0 else 0),
                            10 if k == 0 else 0, 0 if k == 0 else 30, 0 if k == 0 else 20) for k in range(3)]
        for strategy in ("fedavg", "fedavg_semi", "semianagg"):
            out, _ = aggregate_round(ups, strategy, 0.5)
            assert out.equals(p)

    def test_fedavg_semi_scalar(self):
        ups = [update(0, 1.0, n_labeled=100), update(1, 2.0, n_unlabeled=80, n_confident=60),
               update(2, 3.0, n_unlabeled=90, n_confident=40)]
        out, w = aggregate_round(ups, "fedavg_semi", 0.5)
        np.testing.assert_allclose(tn.flatten(out), 1.7, atol=1e-12)

    def test_semianagg_scalar(self):
        ups = [update(0, 10.0, n_unlabeled=50, n_confident=20, w_hat=[0.8, 0.6]),
               update(1, 20.0, n_unlabeled=50, n_confident=20, w_hat=[0.4, 0.8])]
        out, w = aggregate_round(ups, "semianagg", 0.5)
        np.testing.assert_allclose(tn.flatten(out), 10 * 11 / 24 + 20 * 13 / 24, atol=1e-12)
        assert tn.flatten(out)[0] == pytest.approx(15.417, abs=1e-3)

    def test_canonical_order(self):
        ups = [update(2, 3.0, n_labeled=5), update(0, 1.0, n_labeled=7), update(1, 2.0, n_labeled=11)]
        a, wa = aggregate_round(ups, "fedavg")
        b, wb = aggregate_round(list(reversed(ups)), "fedavg")
        assert a.equals(b)
        assert wa.client_ids == [0, 1, 2]

    def test_round_record_json(self):
        reps = [report(0, [0.8, None]), report(1, [0.4, 0.8])]
        text = round_record_json(3, reps, semianagg_weights(reps))
        doc = json.loads(text)
        assert doc["round"] == 3
        assert doc["reports"][0]["w_hat"] == [0.8, None]
        assert doc["weights"]["r"][0][1] is None
        back = [SimilarityReport.from_dict(d) for d in doc["reports"]]
        np.testing.assert_array_equal(semianagg_weights(back).coefficients, doc["weights"]["coefficients"])


class TestSimilarity:
    def test_hand_mean(self):
        q = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        qhat = np.array([[1.0, 0.0], [0.5, np.sqrt(0.75)], [0.0, 2.0]])
        w_hat, counts, n_zero = pseudo_aware_similarity(q, np.ones(3, bool), qhat, [0, 0, 0], 2)
        assert w_hat[0] == pytest.approx(0.5, abs=1e-12)
        assert counts == [3, 0] and w_hat[1] is None and n_zero == 0

    def test_ignored_excluded(self):
        q = np.eye(3)
        w_hat, counts, _ = pseudo_aware_similarity(q, np.ones(3, bool), q, [-1, 1, -1], 2)
        assert counts == [0, 1] and w_hat == [None, 1.0]

    def test_zero_features_skipped(self):
        q, valid = normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert valid.tolist() == [True, False]
        w_hat, counts, n_zero = pseudo_aware_similarity(q, valid, np.array([[2.0, 0.0], [1.0, 1.0]]), [0, 0], 1)
        assert w_hat == [1.0] and counts == [2] and n_zero == 1

    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, seed, s_anchor, s_global):
        r = np.random.default_rng(seed)
        raw_q = np.abs(r.normal(size=(30, 6)))
        raw_qhat = np.abs(r.normal(size=(30, 6)))
        pseudo = r.integers(-1, 4, 30)
        q, v = normalize_rows(raw_q)
        qs, vs = normalize_rows(raw_q * s_anchor)
        a = pseudo_aware_similarity(q, v, raw_qhat, pseudo, 4)
        b = pseudo_aware_similarity(qs, vs, raw_qhat * s_global, pseudo, 4)
        assert a[1] == b[1]
        for x, y in zip(a[0], b[0]):
            assert (x is None and y is None) or abs(x - y) <= 1e-12


def small_client(seed=0, n=30):
    d = gen_gaussian_mixture(3, 4, [n] * 3, 0.2, seed)
    return ClientDataset.build(seed, [], [], d.X, d.y, feature_dim=4)


class TestReports:
    arch = tn.Architecture((4, 8, 3))

    def test_dictionary_unit_norm_and_deterministic(self):
        c = small_client()
        anchor = tn.init_params(self.arch, 11)
        d1, d2 = build_anchor_dictionary(anchor, c, 11), build_anchor_dictionary(anchor, c, 11)
        np.testing.assert_array_equal(d1.features, d2.features)
        norms = np.linalg.norm(d1.features[d1.valid], axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_shared_sample_same_feature(self):
        a, b = small_client(0), small_client(1)
        x = a.X_unlabeled[5]
        b2 = ClientDataset.build(1, [], [], np.vstack([b.X_unlabeled, x]), feature_dim=4)
        anchor = tn.init_params(self.arch, 11)
        da, db = build_anchor_dictionary(anchor, a), build_anchor_dictionary(anchor, b2)
        np.testing.assert_array_equal(da.features[5], db.features[-1])

    def test_storage_footprint(self):
        c = ClientDataset.build(0, [], [], np.zeros((484, 4)), feature_dim=4)
        d = build_anchor_dictionary(tn.init_params(tn.Architecture((4, 512, 3)), 0), c)
        assert d.storage_bytes() == 484 * 512 * 4 == 991_232
        assert round(d.storage_bytes() / 1024) == 968

    def test_self_match(self):
        c = small_client()
        anchor = tn.init_params(self.arch, 11)
        rep = compute_similarity_report(anchor, c, build_anchor_dictionary(anchor, c), ThresholdState.fresh(3, 0.34))
        assert rep.n_confident > 0
        for w, n in zip(rep.w_hat, rep.counts):
            assert (n == 0 and w is None) or w == pytest.approx(1.0, abs=1e-12)

    def test_all_ignored(self):
        c = small_client()
        anchor = tn.init_params(self.arch, 11)
        rep = compute_similarity_report(tn.zeros_like(self.arch), c, build_anchor_dictionary(anchor, c),
                                        ThresholdState.fresh(3, 0.95))
        assert rep.w_hat == [None] * 3 and rep.n_confident == 0

    def test_alignment(self):
        c = small_client()
        anchor = tn.init_params(self.arch, 11)
        d = build_anchor_dictionary(anchor, small_client(n=20))
        with pytest.raises(AlignmentError):
            compute_similarity_report(anchor, c, d, ThresholdState.fresh(3))

    def test_self_match_weights_fall_back_to_uniform(self):
        anchor = tn.init_params(self.arch, 11)
        reps = [compute_similarity_report(anchor, c, build_anchor_dictionary(anchor, c), ThresholdState.fresh(3, 0.34))
                for c in (small_client(0), small_client(1), small_client(2))]
        w = semianagg_weights(reps, 0.5)
        assert np.all(np.nan_to_num(w.r, nan=0.0) == 0.0)
        assert w.fallback == "uniform_unsupervised"
        np.testing.assert_allclose(w.unsup_weights, [1 / 3] * 3)
