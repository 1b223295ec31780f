"""Engine tests: schedules, sampling, aggregation, broadcast, and full rounds."""

import itertools
import math

import numpy as np
import pytest

from fedquant import federation as fed
from fedquant import models as m
from fedquant import quantizer as qz
from fedquant.streams import substream

QUADRATIC = m.LossModel(m.LossKind.QUADRATIC)


def clone_config(cfg: fed.FederationConfig, **overrides) -> fed.FederationConfig:
    fields = {name: getattr(cfg, name) for name in cfg.__dataclass_fields__}
    fields.update(overrides)
    return fed.FederationConfig(**fields)


class TestLearningRateSchedule:
    def test_formula(self):
        assert fed.lr_schedule(0, 1.0, 16.0) == 0.125

    def test_strictly_decreasing(self):
        etas = [fed.lr_schedule(t, 1.0, 16.0) for t in range(100)]
        assert all(a > b for a, b in zip(etas, etas[1:]))

    def test_window_ratio_bounded(self):
        # eta_t <= 2 * eta_{t+E} over a long sweep
        mu, lipschitz, e = 0.5, 2.0, 5
        gamma = fed.gamma_offset(mu, lipschitz, e)
        for t in range(0, int(10 * gamma)):
            assert (fed.lr_schedule(t, mu, gamma)
                    <= 2.0 * fed.lr_schedule(t + e, mu, gamma))

    def test_gamma_offset(self):
        assert fed.gamma_offset(1.0, 2.0, 5) == 16.0
        assert fed.gamma_offset(1.0, 1.0, 20) == 20.0


class TestWeightUplinkBits:
    def test_formula(self):
        assert fed.weight_uplink_bits(1, 1.0, 16.0) == 4  # ceil(log2 9)
        assert fed.weight_uplink_bits(1, 2.0, 8.0) == 4

    def test_logarithmic_growth(self):
        gamma = 16.0
        for t in range(int(gamma), 2000, 37):
            assert (fed.weight_uplink_bits(10 * t, 1.0, gamma)
                    - fed.weight_uplink_bits(t, 1.0, gamma)) <= 4

    def test_requires_positive_index(self):
        with pytest.raises(ValueError):
            fed.weight_uplink_bits(0, 1.0, 16.0)

    def test_integrality(self):
        for t in range(1, 10_001, 7):
            b = fed.weight_uplink_bits(t, 0.7, 11.0)
            assert isinstance(b, int) and b >= 1


class TestDownlinkLogBits:
    def test_formula(self):
        # eta = 0.125: ceil(log2(1 + sqrt(0.875)/0.125)) = ceil(log2 8.483) = 4
        assert fed.downlink_log_bits(0, 1.0, 16.0) == 4

    def test_non_decreasing(self):
        widths = [fed.downlink_log_bits(t, 1.0, 16.0) for t in range(10_000)]
        assert all(a <= b for a, b in zip(widths, widths[1:]))

    def test_asymptotically_logarithmic(self):
        # B_t tracks log2(1/eta_t) for large t
        for t in (10 ** 4, 10 ** 5, 10 ** 6):
            eta = fed.lr_schedule(t, 1.0, 16.0)
            assert abs(fed.downlink_log_bits(t, 1.0, 16.0)
                       - math.log2(1.0 / eta)) <= 1.0

    def test_precondition(self):
        with pytest.raises(ValueError):
            fed.downlink_log_bits(0, 1.0, 1.0)  # eta * mu = 2 >= 1


class TestStepLogBits:
    @pytest.mark.parametrize("r, f, p, expected", [
        (1, 2.0, 75.0, 1),
        (151, 2.0, 75.0, 2),
        (1, 4.0, 37.5, 2),
    ])
    def test_examples(self, r, f, p, expected):
        assert fed.step_log_bits(r, f, p) == expected

    def test_guards(self):
        with pytest.raises(ValueError):
            fed.step_log_bits(0, 2.0, 75.0)
        with pytest.raises(ValueError):
            fed.step_log_bits(1, 1.5, 75.0)

    def test_schedule_dispatch(self):
        gamma = 16.0
        spec = fed.ScheduleSpec(fed.ScheduleKind.STEP_LOG, f=2.0, p=75.0)
        assert fed.schedule_bits(spec, 0, 1.0, gamma) == fed.step_log_bits(1, 2.0, 75.0)
        spec = fed.ScheduleSpec(fed.ScheduleKind.WEIGHT_LOG)
        assert fed.schedule_bits(spec, 0, 1.0, gamma) == fed.weight_uplink_bits(1, 1.0, gamma)
        spec = fed.ScheduleSpec.constant(6)
        assert fed.schedule_bits(spec, 123, 1.0, gamma) == 6

    def test_integrality_over_horizon(self):
        gamma = 16.0
        specs = [
            fed.ScheduleSpec.constant(3),
            fed.ScheduleSpec(fed.ScheduleKind.WEIGHT_LOG),
            fed.ScheduleSpec(fed.ScheduleKind.DOWNLINK_LOG),
            fed.ScheduleSpec(fed.ScheduleKind.STEP_LOG, f=2.0, p=75.0),
        ]
        for spec in specs:
            for t in range(0, 5000, 13):
                b = fed.schedule_bits(spec, t, 1.0, gamma)
                assert isinstance(b, int) and b >= 1


class TestSampleClients:
    def test_full_participation(self):
        sel = fed.sample_clients(5, 5, substream(0))
        assert sel.tolist() == [0, 1, 2, 3, 4]

    def test_deterministic(self):
        assert np.array_equal(fed.sample_clients(10, 3, substream(1)),
                              fed.sample_clients(10, 3, substream(1)))

    def test_sorted_subset_without_replacement(self):
        sel = fed.sample_clients(20, 8, substream(2))
        assert len(set(sel.tolist())) == 8
        assert sel.tolist() == sorted(sel.tolist())

    def test_all_subsets_reachable(self):
        seen = set()
        for seed in range(200):
            seen.add(tuple(fed.sample_clients(4, 2, substream(seed))))
        assert seen == set(itertools.combinations(range(4), 2))

    def test_uniformity_chi_square(self):
        rng = substream(3)
        counts = {s: 0 for s in itertools.combinations(range(4), 2)}
        draws = 60_000
        for _ in range(draws):
            counts[tuple(fed.sample_clients(4, 2, rng))] += 1
        expected = draws / 6
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        # central 99% band of chi-square with 5 degrees of freedom
        assert 0.412 < chi2 < 16.75

    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            fed.sample_clients(3, 4, substream(0))


class TestAggregation:
    def test_mean(self):
        out = fed.aggregate_weights([np.array([1.0]), np.array([3.0])])
        assert out.tolist() == [2.0]

    def test_single_upload_identity(self):
        v = substream(4).standard_normal(6)
        assert np.array_equal(fed.aggregate_weights([v]), v)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fed.aggregate_weights([np.zeros(2), np.zeros(3)])

    def test_weighted_form_equals_mean_for_equal_sizes(self):
        rng = substream(5)
        uploads = [rng.standard_normal(8) for _ in range(5)]
        sizes = np.full(5, 13.0)
        weighted = sum((s / sizes.sum()) * u for s, u in zip(sizes, uploads))
        assert np.allclose(fed.aggregate_weights(uploads), weighted, atol=1e-12)

    def test_differential_zero_is_identity(self):
        prev = substream(6).standard_normal(4)
        out = fed.aggregate_differentials(prev, [np.zeros(4), np.zeros(4)])
        assert np.array_equal(out, prev)

    def test_differential_single_client(self):
        out = fed.aggregate_differentials(np.array([1.0]), [np.array([0.5])])
        assert out.tolist() == [1.5]

    def test_differential_equals_weight_aggregation(self):
        rng = substream(7)
        prev = rng.standard_normal(6)
        locals_ = [rng.standard_normal(6) for _ in range(4)]
        via_diff = fed.aggregate_differentials(prev, [w - prev for w in locals_])
        via_weight = fed.aggregate_weights(locals_)
        assert np.allclose(via_diff, via_weight, atol=1e-12)

    def test_missing_state_rejected(self):
        with pytest.raises(fed.StateError):
            fed.aggregate_differentials(None, [np.zeros(2)])


class TestConfigValidation:
    def test_participation_bounds(self):
        with pytest.raises(fed.ConfigError, match="clients_per_round"):
            fed.FederationConfig(num_clients=3, clients_per_round=4)

    def test_symmetric_grid_needs_stochastic(self):
        with pytest.raises(fed.ConfigError):
            fed.FederationConfig(rounding=qz.Rounding.NEAREST,
                                 grid=qz.GridKind.SYMMETRIC)

    def test_layer_sizes_must_cover_dimension(self):
        with pytest.raises(fed.ConfigError):
            fed.FederationConfig(dimension=10, layer_sizes=(5, 4))

    def test_schedule_parameters_validated(self):
        with pytest.raises(fed.ConfigError):
            fed.ScheduleSpec(fed.ScheduleKind.STEP_LOG, f=1.0, p=70.0)
        with pytest.raises(fed.ConfigError):
            fed.ScheduleSpec.constant(0)

    def test_zero_rounds_allowed(self):
        cfg = fed.FederationConfig(rounds=0)
        assert fed.run_federation(cfg) == []


class TestBroadcast:
    def small_weights(self):
        return m.WeightVector(np.array([0.5, -0.25, 0.75, -0.125]))

    def test_float_is_identity(self):
        cfg = fed.FederationConfig(downlink_mode=fed.DownlinkMode.FLOAT)
        w = self.small_weights()
        delivered, bits, _ = fed.broadcast(w, cfg, 0, substream(8))
        assert np.array_equal(delivered.values, w.values)
        assert bits == 32 * 4

    def test_quantized_grid_unbiased_monte_carlo(self):
        # one broadcast draw per round; simulate many draws by tiling the
        # vector through the same grid quantizer
        w = np.array([0.3, -0.9, 0.41, 0.0])
        bound = 1.0
        bits = 3
        draws = 10 ** 5
        spec = qz.QuantizerSpec.symmetric_grid(bound, bits)
        tiled = qz.quantize_vector(np.tile(w, draws), spec, substream(9))
        means = tiled.dequantize().reshape(draws, 4).mean(axis=0)
        sigma = qz.GridSpec(bound, bits).half_step / math.sqrt(draws)
        assert np.all(np.abs(means - w) <= 3 * sigma + 1e-12)

    def test_quantized_respects_weight_bound(self):
        cfg = fed.FederationConfig(downlink_mode=fed.DownlinkMode.QUANTIZED,
                                   weight_bound=0.5)
        w = self.small_weights()
        with pytest.raises(fed.AssumptionViolation):
            fed.broadcast(w, cfg, 4, substream(10))

    def test_layered_beats_single_gain_on_split_ranges(self):
        rng = substream(11)
        values = np.concatenate([rng.uniform(-1, 1, 32),
                                 rng.uniform(-0.01, 0.01, 32)])
        layers = ((0, 32), (32, 64))
        bits = 4
        base, extras = qz.layered_gains(values, layers, bits)
        per_layer_mse = sum(
            qz.expected_sq_error(values[a:b], qz.QuantizerSpec.tuned(bits, base * g))
            for (a, b), g in zip(layers, extras)
        )
        whole_base, whole_extras = qz.layered_gains(values, ((0, 64),), bits)
        single_gain = whole_base * float(whole_extras[0])
        single_mse = qz.expected_sq_error(values, qz.QuantizerSpec.tuned(bits, single_gain))
        assert per_layer_mse <= single_mse

    def test_layered_broadcast_layer_count_header(self):
        cfg = fed.FederationConfig(
            downlink_mode=fed.DownlinkMode.LAYERED, dimension=4,
            layer_sizes=(2, 2), grid=qz.GridKind.PIPELINE)
        w = m.WeightVector(np.array([0.5, -0.25, 0.003, -0.001]), ((0, 2), (2, 4)))
        _, bits, extras = fed.broadcast(w, cfg, 4, substream(12))
        assert bits == 2 * (2 * 4 + 17 * 8)
        assert extras.shape == (2,)

    def test_static_layered_freezes_gains(self):
        cfg = fed.FederationConfig(
            downlink_mode=fed.DownlinkMode.LAYERED, dimension=4,
            layer_sizes=(2, 2), grid=qz.GridKind.PIPELINE, lq_static=True)
        w = m.WeightVector(np.array([0.5, -0.25, 0.003, -0.001]), ((0, 2), (2, 4)))
        frozen = np.array([4.0, 4.0])
        delivered, _, extras = fed.broadcast(w, cfg, 4, substream(13),
                                             frozen_extra_gains=frozen)
        assert np.array_equal(extras, frozen)
        # codewords decode against the frozen gain 8 * 4
        assert np.all(np.abs(delivered.values * 32.0 - np.round(
            delivered.values * 32.0)) < 1e-9)


class TestRunRound:
    def base_config(self, **overrides):
        defaults = dict(num_clients=6, clients_per_round=3, local_steps=2,
                        rounds=5, batch_size=2, dimension=4,
                        samples_per_client=6, spread=1.0, seed=3)
        defaults.update(overrides)
        return fed.FederationConfig(**defaults)

    def test_bits_accounting_differential(self):
        cfg = self.base_config(
            dimension=100, uplink_mode=fed.UplinkMode.DIFFERENTIAL,
            uplink_schedule=fed.ScheduleSpec.constant(2))
        records = fed.run_federation(cfg)
        per_round = 3 * (100 * 2 + 17 * 8)
        for t, rec in enumerate(records):
            assert rec.uplink_bits_cum == (t + 1) * per_round
            assert rec.downlink_bits_cum == (t + 1) * 32 * 100

    def test_bits_monotone_all_modes(self):
        for uplink, downlink in [
            (fed.UplinkMode.WEIGHT, fed.DownlinkMode.FLOAT),
            (fed.UplinkMode.DIFFERENTIAL, fed.DownlinkMode.QUANTIZED),
        ]:
            cfg = self.base_config(
                uplink_mode=uplink, downlink_mode=downlink, weight_bound=8.0,
                uplink_schedule=fed.ScheduleSpec.constant(3),
                downlink_schedule=fed.ScheduleSpec.constant(3))
            records = fed.run_federation(cfg)
            ups = [r.uplink_bits_cum for r in records]
            downs = [r.downlink_bits_cum for r in records]
            assert all(a < b for a, b in zip(ups, ups[1:]))
            assert all(a < b for a, b in zip(downs, downs[1:]))

    def test_weight_mode_assumption_violation(self):
        cfg = self.base_config(uplink_mode=fed.UplinkMode.WEIGHT,
                               uplink_schedule=fed.ScheduleSpec.constant(4),
                               weight_bound=1e-6)
        with pytest.raises(fed.AssumptionViolation):
            fed.run_federation(cfg)

    def test_determinism(self):
        cfg = self.base_config(uplink_mode=fed.UplinkMode.DIFFERENTIAL,
                               uplink_schedule=fed.ScheduleSpec.constant(3))
        assert fed.run_federation(cfg) == fed.run_federation(cfg)

    def test_gap_uses_solved_optimum(self):
        cfg = self.base_config()
        model, datasets = fed.build_problem(cfg)
        opt = m.solve_optimum(model, datasets)
        records = fed.run_federation(cfg, model, datasets)
        assert records[-1].gap == pytest.approx(
            records[-1].train_loss - opt.f_star, abs=0)

    def test_scheduled_bits_recorded(self):
        cfg = self.base_config(
            uplink_mode=fed.UplinkMode.WEIGHT, weight_bound=8.0,
            uplink_schedule=fed.ScheduleSpec(fed.ScheduleKind.WEIGHT_LOG),
            downlink_mode=fed.DownlinkMode.QUANTIZED,
            downlink_schedule=fed.ScheduleSpec(fed.ScheduleKind.DOWNLINK_LOG))
        gamma = fed.gamma_offset(cfg.mu, cfg.lipschitz, cfg.local_steps)
        for t, rec in enumerate(fed.run_federation(cfg)):
            assert rec.bits_up == fed.weight_uplink_bits(t + 1, cfg.mu, gamma)
            assert rec.bits_down == fed.downlink_log_bits(t, cfg.mu, gamma)

    def test_one_round_full_batch_contraction(self):
        # full participation, full batch, one local step: the round is one
        # exact global gradient step, contracting the gap by (1 - eta)^2
        cfg = self.base_config(num_clients=4, clients_per_round=4,
                               local_steps=1, batch_size=6, rounds=1)
        model, datasets = fed.build_problem(cfg)
        opt = m.solve_optimum(model, datasets)
        state = fed.init_state(cfg, model, datasets)
        gamma = fed.gamma_offset(cfg.mu, cfg.lipschitz, cfg.local_steps)
        eta = fed.lr_schedule(0, cfg.mu, gamma)
        gap0 = m.global_loss(model, np.zeros(cfg.dimension), datasets) - opt.f_star
        _, record = fed.run_round(state, cfg, 0)
        assert record.gap == pytest.approx((1 - eta) ** 2 * gap0, rel=1e-12)


class TestFloatEquivalences:
    def test_float_float_matches_reference_loop(self):
        cfg = fed.FederationConfig(
            num_clients=8, clients_per_round=3, local_steps=2, rounds=25,
            batch_size=4, dimension=5, samples_per_client=10, seed=11)
        model, datasets = fed.build_problem(cfg)

        engine_track = []
        fed.run_federation(cfg, model, datasets,
                           observer=lambda t, w: engine_track.append(w.values.copy()))

        gamma = fed.gamma_offset(cfg.mu, cfg.lipschitz, cfg.local_steps)
        w = np.zeros(cfg.dimension)
        for t in range(cfg.rounds):
            eta = fed.lr_schedule(t, cfg.mu, gamma)
            selected = fed.sample_clients(cfg.num_clients, cfg.clients_per_round,
                                          fed.sampling_stream(cfg.seed, t))
            locals_ = [
                m.local_train(w, model, datasets[k], cfg.local_steps,
                              cfg.batch_size, eta,
                              fed.train_stream(cfg.seed, t, int(k)))
                for k in selected
            ]
            w = np.stack(locals_).mean(axis=0)
            assert np.array_equal(w, engine_track[t])

    def test_float_differential_equals_float_weight(self):
        # exchanging exact differentials reproduces exact weight exchange
        cfg = fed.FederationConfig(
            num_clients=6, clients_per_round=2, local_steps=3, rounds=30,
            batch_size=3, dimension=4, samples_per_client=8, seed=21)
        model, datasets = fed.build_problem(cfg)
        gamma = fed.gamma_offset(cfg.mu, cfg.lipschitz, cfg.local_steps)
        w_weight = np.zeros(cfg.dimension)
        w_diff = np.zeros(cfg.dimension)
        for t in range(cfg.rounds):
            eta = fed.lr_schedule(t, cfg.mu, gamma)
            selected = fed.sample_clients(cfg.num_clients, cfg.clients_per_round,
                                          fed.sampling_stream(cfg.seed, t))

            locals_w = [m.local_train(w_weight, model, datasets[k],
                                      cfg.local_steps, cfg.batch_size, eta,
                                      fed.train_stream(cfg.seed, t, int(k)))
                        for k in selected]
            w_weight = fed.aggregate_weights(locals_w)

            locals_d = [m.local_train(w_diff, model, datasets[k],
                                      cfg.local_steps, cfg.batch_size, eta,
                                      fed.train_stream(cfg.seed, t, int(k)))
                        for k in selected]
            w_diff = fed.aggregate_differentials(
                w_diff, [wl - w_diff for wl in locals_d])
            assert np.max(np.abs(w_diff - w_weight)) <= 1e-12


class TestSamplingUnbiasedness:
    def test_enumerated_subset_average_equals_mean(self):
        # N=6, K=2: averaging the subset means over all 15 subsets recovers
        # the full mean
        rng = substream(30)
        vectors = rng.standard_normal((6, 4))
        subset_means = [vectors[list(s)].mean(axis=0)
                        for s in itertools.combinations(range(6), 2)]
        assert np.allclose(np.mean(subset_means, axis=0),
                           vectors.mean(axis=0), atol=1e-12)
