"""Aggregation strategies: coefficients, divergence scaling, dispatch, warm-up."""

import math

import numpy as np
import pytest

from fedsim.aggregation import (
    AggregationSpec,
    ClientUpdate,
    aggregate,
    aggregate_ldawa,
    aggregate_mdawa,
    aggregate_weighted_ldawa,
    coeffs_fedavg,
    coeffs_loss,
    divergence_reports,
    effective_strategy,
)
from fedsim.divergence import DivergenceReport
from fedsim.params import LayerTensor, ParamSet


def ps(named):
    return ParamSet(
        tuple(
            LayerTensor(n, np.asarray(v, dtype=np.float64).shape, np.asarray(v, dtype=np.float64))
            for n, v in named.items()
        )
    )


def update(client_id, named, n=1, loss=0.0):
    return ClientUpdate(client_id, ps(named), n, loss)


def random_fixture(rng, n_clients=None, n_layers=None, max_params=8):
    """Random global model plus compatible client updates."""
    n_clients = n_clients or int(rng.integers(2, 9))
    n_layers = n_layers or int(rng.integers(1, 6))
    sizes = [int(rng.integers(1, max_params + 1)) for _ in range(n_layers)]
    def draw():
        return ps({f"layer{i}": rng.normal(size=s) for i, s in enumerate(sizes)})
    global_params = draw()
    updates = [
        ClientUpdate(k, draw(), int(rng.integers(1, 50)), float(rng.normal()))
        for k in range(n_clients)
    ]
    return global_params, updates


def brute_force_cosine(g, c):
    num = sum(float(x) * float(y) for x, y in zip(g, c))
    ng = math.sqrt(sum(float(x) ** 2 for x in g))
    nc = math.sqrt(sum(float(x) ** 2 for x in c))
    if ng <= 1e-12 and nc <= 1e-12:
        return 1.0
    if ng <= 1e-12 or nc <= 1e-12:
        return 0.0
    return max(-1.0, min(1.0, num / (ng * nc)))


def brute_force_layerwise(global_params, updates, base_coeffs):
    """Scalar-loop expansion of the layer-wise divergence-scaled double sum."""
    result = {}
    for layer in global_params.layers:
        acc = [0.0] * layer.size
        for u, beta in zip(updates, base_coeffs):
            client_layer = u.params.layer(layer.name)
            delta = brute_force_cosine(layer.values, client_layer.values)
            for i in range(layer.size):
                acc[i] += beta * delta * float(client_layer.values[i])
        result[layer.name] = acc
    return result


class TestCoeffsFedavg:
    def test_hand_normalization(self):
        ups = [update(0, {"w": [1.0]}, n=3), update(1, {"w": [1.0]}, n=1)]
        assert coeffs_fedavg(ups) == [0.75, 0.25]

    def test_equal_counts_uniform(self):
        ups = [update(i, {"w": [1.0]}, n=7) for i in range(4)]
        assert coeffs_fedavg(ups) == [0.25] * 4

    def test_single_client(self):
        assert coeffs_fedavg([update(0, {"w": [1.0]}, n=5)]) == [1.0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            coeffs_fedavg([])


class TestCoeffsLoss:
    def test_analytic_softmax(self):
        ups = [update(0, {"w": [1.0]}, loss=0.0), update(1, {"w": [1.0]}, loss=math.log(2))]
        got = coeffs_loss(ups)
        assert got[0] == pytest.approx(2 / 3, abs=1e-12)
        assert got[1] == pytest.approx(1 / 3, abs=1e-12)

    def test_equal_losses_uniform(self):
        ups = [update(i, {"w": [1.0]}, loss=1.7) for i in range(5)]
        for c in coeffs_loss(ups):
            assert c == pytest.approx(0.2, abs=1e-15)

    def test_no_overflow_at_huge_losses(self):
        ups = [update(0, {"w": [1.0]}, loss=0.0), update(1, {"w": [1.0]}, loss=1000.0)]
        got = coeffs_loss(ups)
        assert got[0] == pytest.approx(1.0, abs=1e-12)
        assert got[1] == pytest.approx(0.0, abs=1e-12)
        assert all(math.isfinite(c) for c in got)

    def test_sums_to_one_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ups = [
                update(i, {"w": [1.0]}, n=int(rng.integers(1, 1000)), loss=float(rng.normal(0, 100)))
                for i in range(int(rng.integers(1, 8)))
            ]
            assert sum(coeffs_loss(ups)) == pytest.approx(1.0, abs=1e-12)
            assert sum(coeffs_fedavg(ups)) == pytest.approx(1.0, abs=1e-12)


class TestMdawa:
    def test_single_identical_client_is_fixed_point(self):
        g = ps({"w": [1.0, 2.0]})
        out = aggregate_mdawa(g, [ClientUpdate(0, g, 1, 0.0)])
        assert out == g

    def test_orthogonal_client_contributes_nothing(self):
        g = ps({"w": [1.0, 0.0]})
        ups = [update(0, {"w": [2.0, 0.0]}), update(1, {"w": [0.0, 2.0]})]
        out = aggregate_mdawa(g, ups)
        np.testing.assert_allclose(out.layer("w").values, [1.0, 0.0], atol=1e-15)

    def test_negated_client_flips_back(self):
        g = ps({"w": [1.0, 2.0]})
        c = ps({"w": [-1.0, -2.0]})
        out = aggregate_mdawa(g, [ClientUpdate(0, c, 1, 0.0)])
        np.testing.assert_allclose(out.layer("w").values, g.layer("w").values, atol=1e-15)


class TestLdawa:
    def test_identical_clients_are_fixed_point(self):
        g = ps({"a": [1.0, 2.0], "b": [3.0]})
        ups = [ClientUpdate(i, g, 1, 0.0) for i in range(3)]
        out = aggregate_ldawa(g, ups)
        for layer in out.layers:
            np.testing.assert_allclose(layer.values, g.layer(layer.name).values, atol=1e-15)

    def test_single_layer_equals_mdawa(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g, ups = random_fixture(rng, n_layers=1)
            a = aggregate_ldawa(g, ups)
            b = aggregate_mdawa(g, ups)
            assert np.abs(a.layers[0].values - b.layers[0].values).max() < 1e-12

    def test_matches_brute_force_expansion(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            g, ups = random_fixture(rng)
            k = len(ups)
            out = aggregate_ldawa(g, ups)
            expected = brute_force_layerwise(g, ups, [1.0 / k] * k)
            for layer in out.layers:
                assert np.abs(layer.values - expected[layer.name]).max() < 1e-12


class TestWeightedLdawa:
    def test_uniform_base_reduces_to_ldawa(self):
        rng = np.random.default_rng(3)
        g, ups = random_fixture(rng)
        k = len(ups)
        a = aggregate_weighted_ldawa(g, ups, [1.0 / k] * k)
        b = aggregate_ldawa(g, ups)
        for la, lb in zip(a.layers, b.layers):
            assert np.abs(la.values - lb.values).max() < 1e-12

    def test_unit_deltas_reduce_to_plain_fedavg(self):
        rng = np.random.default_rng(4)
        g, ups = random_fixture(rng)
        ones = [
            DivergenceReport(u.client_id, {n: 1.0 for n in g.names}, 1.0) for u in ups
        ]
        betas = coeffs_fedavg(ups)
        out = aggregate_weighted_ldawa(g, ups, betas, reports=ones)
        from fedsim.params import weighted_sum

        plain = weighted_sum([u.params for u in ups], betas)
        for la, lb in zip(out.layers, plain.layers):
            assert np.abs(la.values - lb.values).max() < 1e-12

    def test_loss_weighted_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            g, ups = random_fixture(rng, n_clients=2, n_layers=2)
            betas = coeffs_loss(ups)
            out = aggregate_weighted_ldawa(g, ups, betas)
            expected = brute_force_layerwise(g, ups, betas)
            for layer in out.layers:
                assert np.abs(layer.values - expected[layer.name]).max() < 1e-12

    def test_length_mismatch_rejected(self):
        g, ups = random_fixture(np.random.default_rng(6))
        with pytest.raises(ValueError, match="coefficients"):
            aggregate_weighted_ldawa(g, ups, [1.0])


class TestDispatch:
    def test_warmup_forces_fedavg(self):
        rng = np.random.default_rng(7)
        g, ups = random_fixture(rng)
        spec = AggregationSpec("ldawa", warmup_rounds=2)
        warm, _ = aggregate(spec, 0, g, ups)
        fed, _ = aggregate(AggregationSpec("fedavg"), 0, g, ups)
        assert warm == fed
        after, _ = aggregate(spec, 2, g, ups)
        direct = aggregate_ldawa(g, ups)
        assert after == direct
        assert effective_strategy(spec, 1) == "fedavg"
        assert effective_strategy(spec, 2) == "ldawa"

    def test_fairavg_uniform_mean(self):
        g = ps({"w": [1.0, 1.0]})
        ups = [update(0, {"w": [2.0, 0.0]}), update(1, {"w": [0.0, 2.0]})]
        out, _ = aggregate(AggregationSpec("fairavg"), 0, g, ups)
        np.testing.assert_array_equal(out.layer("w").values, [1.0, 1.0])

    def test_fedavg_equal_counts_equals_fairavg(self):
        rng = np.random.default_rng(8)
        g, ups = random_fixture(rng)
        ups = [ClientUpdate(u.client_id, u.params, 13, u.train_loss) for u in ups]
        a, _ = aggregate(AggregationSpec("fedavg"), 0, g, ups)
        b, _ = aggregate(AggregationSpec("fairavg"), 0, g, ups)
        for la, lb in zip(a.layers, b.layers):
            assert np.abs(la.values - lb.values).max() < 1e-12

    def test_reports_returned_for_every_strategy(self):
        rng = np.random.default_rng(9)
        g, ups = random_fixture(rng, n_clients=3)
        for strategy in ("fedavg", "fairavg", "loss", "mdawa", "ldawa", "ldawa_fedavg", "ldawa_loss", "ldawa_fedu"):
            _, reports = aggregate(AggregationSpec(strategy), 5, g, ups)
            assert [r.client_id for r in reports] == [0, 1, 2]

    def test_ldawa_fedu_server_side_equals_ldawa_fedavg(self):
        rng = np.random.default_rng(10)
        g, ups = random_fixture(rng)
        a, _ = aggregate(AggregationSpec("ldawa_fedu", fedu_threshold=0.5), 3, g, ups)
        b, _ = aggregate(AggregationSpec("ldawa_fedavg"), 3, g, ups)
        assert a == b

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError, match="unknown strategy"):
            AggregationSpec("median")

    def test_empty_updates_rejected(self):
        g = ps({"w": [1.0]})
        with pytest.raises(ValueError):
            aggregate(AggregationSpec("fedavg"), 0, g, [])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        g, ups = random_fixture(rng, n_clients=5)
        permuted = [ups[i] for i in rng.permutation(len(ups))]
        for strategy in ("fedavg", "fairavg", "loss", "mdawa", "ldawa", "ldawa_fedavg", "ldawa_loss"):
            a, _ = aggregate(AggregationSpec(strategy), 0, g, ups)
            b, _ = aggregate(AggregationSpec(strategy), 0, g, permuted)
            for la, lb in zip(a.layers, b.layers):
                assert np.abs(la.values - lb.values).max() < 1e-12

    def test_renormalize_restores_scale_for_identical_direction(self):
        # Clients at half the global's scale: ldawa contracts, the
        # renormalized variant divides the shrink back out.
        g = ps({"w": [2.0, 0.0]})
        ups = [update(0, {"w": [1.0, 0.0]}), update(1, {"w": [1.0, 0.0]})]
        plain, _ = aggregate(AggregationSpec("ldawa"), 0, g, ups)
        renorm, _ = aggregate(AggregationSpec("ldawa", renormalize=True), 0, g, ups)
        np.testing.assert_allclose(plain.layer("w").values, [1.0, 0.0])
        np.testing.assert_allclose(renorm.layer("w").values, [1.0, 0.0])
        # opposed client shrinks the unnormalized aggregate
        ups2 = [update(0, {"w": [1.0, 0.0]}), update(1, {"w": [-1.0, 0.0]})]
        plain2, _ = aggregate(AggregationSpec("ldawa"), 0, g, ups2)
        np.testing.assert_allclose(plain2.layer("w").values, [1.0, 0.0])

    def test_renormalize_divides_out_partial_alignment(self):
        # one aligned client, one orthogonal: coefficients (1, 0)/2 sum to
        # 1/2, so the normalized aggregate is exactly the aligned client
        g = ps({"w": [1.0, 0.0]})
        ups = [update(0, {"w": [2.0, 0.0]}), update(1, {"w": [0.0, 2.0]})]
        plain, _ = aggregate(AggregationSpec("ldawa", renormalize=True), 0, g, ups)
        np.testing.assert_allclose(plain.layer("w").values, [2.0, 0.0], atol=1e-15)
        whole, _ = aggregate(AggregationSpec("mdawa", renormalize=True), 0, g, ups)
        np.testing.assert_allclose(whole.layer("w").values, [2.0, 0.0], atol=1e-15)

    def test_loss_strategy_dispatch_matches_direct_weighting(self):
        rng = np.random.default_rng(14)
        g, ups = random_fixture(rng)
        got, _ = aggregate(AggregationSpec("loss"), 0, g, ups)
        from fedsim.params import weighted_sum

        ordered = sorted(ups, key=lambda u: u.client_id)
        direct = weighted_sum([u.params for u in ordered], coeffs_loss(ordered))
        assert got == direct


class TestRangeCorrection:
    def test_scaled_contribution_never_opposes_global(self):
        rng = np.random.default_rng(12)
        from fedsim.divergence import cosine
        from fedsim.params import LayerTensor as LT

        for _ in range(50):
            g, ups = random_fixture(rng, n_clients=2, n_layers=2)
            reports = divergence_reports(g, ups)
            for u, rep in zip(ups, reports):
                for layer in g.layers:
                    delta = rep.per_layer_delta[layer.name]
                    base = cosine(layer, u.params.layer(layer.name))
                    if base == 0.0:
                        continue
                    scaled = LT(layer.name, layer.shape, delta * u.params.layer(layer.name).values)
                    assert cosine(layer, scaled) >= 0.0


class TestDominanceBias:
    def test_fedavg_tracks_the_big_client(self):
        rng = np.random.default_rng(13)
        g = ps({"w": rng.normal(size=4)})
        big = update(0, {"w": rng.normal(size=4) + 3.0}, n=9)
        small = [update(i, {"w": rng.normal(size=4)}, n=1) for i in range(1, 5)]
        ups = [big] + small
        fed, _ = aggregate(AggregationSpec("fedavg"), 0, g, ups)
        fair, _ = aggregate(AggregationSpec("fairavg"), 0, g, ups)
        d = lambda a, b: float(np.linalg.norm(a.layer("w").values - b.layer("w").values))
        assert d(fed, big.params) < d(fair, big.params)


class TestClientUpdateValidation:
    def test_nonpositive_samples_rejected(self):
        with pytest.raises(ValueError):
            ClientUpdate(0, ps({"w": [1.0]}), 0, 0.0)

    def test_non_finite_loss_rejected(self):
        with pytest.raises(ValueError):
            ClientUpdate(0, ps({"w": [1.0]}), 1, math.inf)
