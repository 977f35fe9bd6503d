import csv
import math

import numpy as np
import pytest

from med2vec import trainer as trainer_module
from med2vec.corpus import (
    Corpus,
    GrouperMap,
    PatientRecord,
    SynthConfig,
    Visit,
    Vocabulary,
    generate_synthetic,
    group_targets,
    to_multi_hot,
)
from med2vec.model import Gradients, NonFiniteLossError, init_params
from med2vec.trainer import (
    OptimizerState,
    TrainConfig,
    TrainingDivergedError,
    adadelta_step,
    make_batches,
    train,
)


def toy_corpus():
    """Three patients with distinct demographics so visits are distinguishable."""
    vocab = Vocabulary(("a", "b", "c", "d"))
    patients = (
        PatientRecord((Visit((0,), (0.1,)), Visit((1,), (0.2,)), Visit((0, 2), (0.3,)))),
        PatientRecord((Visit((2,), (0.4,)), Visit((3,), (0.5,)))),
        PatientRecord((Visit((1, 3), (0.6,)), Visit((0,), (0.7,)), Visit((2,), (0.8,)), Visit((3,), (0.9,)))),
    )
    return Corpus(patients, vocab)


def window_oracle(corpus, window, grouper):
    """Brute-force (center, context targets) pairs per patient, order-free."""
    expected = {}
    for patient in corpus.patients:
        visits = patient.visits
        for t, visit in enumerate(visits):
            neighbors = [
                visits[t + off]
                for off in range(-window, window + 1)
                if off != 0 and 0 <= t + off < len(visits)
            ]
            if grouper is None:
                rows = [tuple(to_multi_hot(n, len(corpus.vocabulary))) for n in neighbors]
            else:
                rows = [tuple(group_targets(n, grouper)) for n in neighbors]
            expected[visit] = sorted(rows)
    return expected


class TestMakeBatches:
    def test_window_truncation_three_visits(self):
        corpus = toy_corpus()
        batches = list(make_batches(corpus, batch_size=100, seed=0, epoch=0, window=1))
        pairs = {v: t for batch in batches for v, t in batch}
        a, b, c = corpus.patients[0].visits
        assert [tuple(r) for r in pairs[a]] == [tuple(to_multi_hot(b, 4))]
        assert sorted(tuple(r) for r in pairs[b]) == sorted(
            [tuple(to_multi_hot(a, 4)), tuple(to_multi_hot(c, 4))]
        )
        assert [tuple(r) for r in pairs[c]] == [tuple(to_multi_hot(b, 4))]

    def test_wide_window_on_two_visit_patient(self):
        corpus = toy_corpus()
        batches = list(make_batches(corpus, batch_size=100, seed=0, epoch=0, window=2))
        pairs = {v: t for batch in batches for v, t in batch}
        first, second = corpus.patients[1].visits
        assert [tuple(r) for r in pairs[first]] == [tuple(to_multi_hot(second, 4))]
        assert [tuple(r) for r in pairs[second]] == [tuple(to_multi_hot(first, 4))]

    @pytest.mark.parametrize("batch_size", [1, 2, 4, 9, 100])
    def test_batch_count_is_ceiling(self, batch_size):
        corpus = toy_corpus()
        batches = list(make_batches(corpus, batch_size, seed=3, epoch=1, window=1))
        assert len(batches) == math.ceil(corpus.total_visits / batch_size)
        assert sum(len(b) for b in batches) == corpus.total_visits
        assert all(len(b) == batch_size for b in batches[:-1])

    @pytest.mark.parametrize("window", [1, 2, 3])
    def test_no_pair_crosses_patients(self, window):
        corpus, grouper, _ = generate_synthetic(SynthConfig(n_patients=12, seed=21))
        expected = window_oracle(corpus, window, grouper)
        seen = {}
        for batch in make_batches(corpus, 7, seed=5, epoch=2, window=window, grouper=grouper):
            for visit, targets in batch:
                seen[visit] = sorted(tuple(r) for r in targets)
        assert seen == expected

    def test_grouped_targets(self):
        corpus = toy_corpus()
        grouper = GrouperMap({0: 0, 1: 0, 2: 1, 3: 1}, 2)
        batches = list(make_batches(corpus, 100, seed=0, epoch=0, window=1, grouper=grouper))
        pairs = {v: t for batch in batches for v, t in batch}
        a = corpus.patients[0].visits[0]
        assert [tuple(r) for r in pairs[a]] == [(1.0, 0.0)]  # neighbor is code 1 -> group 0

    def test_epoch_changes_patient_order(self):
        corpus, grouper, _ = generate_synthetic(SynthConfig(n_patients=30, seed=2))
        first = [v for b in make_batches(corpus, 1000, seed=9, epoch=0, window=1, grouper=grouper) for v, _ in b]
        second = [v for b in make_batches(corpus, 1000, seed=9, epoch=1, window=1, grouper=grouper) for v, _ in b]
        assert first != second
        again = [v for b in make_batches(corpus, 1000, seed=9, epoch=0, window=1, grouper=grouper) for v, _ in b]
        assert first == again


class TestAdadeltaStep:
    def _setup(self):
        params = init_params(n_codes=4, code_dim=2, visit_dim=2, demo_dim=0, n_targets=3, seed=0)
        return params, OptimizerState.zeros(params)

    def test_zero_gradient_keeps_parameters(self):
        params, state = self._setup()
        state.sq_grad["code_bias"][:] = 2.0
        state.sq_update["code_bias"][:] = 3.0
        before = {k: v.copy() for k, v in params.arrays().items()}
        grads = Gradients.zeros_like(params)
        adadelta_step(params, grads, state, rho=0.95, eps=1e-6)
        for name, array in params.arrays().items():
            np.testing.assert_array_equal(array, before[name])
        np.testing.assert_allclose(state.sq_grad["code_bias"], 2.0 * 0.95)
        np.testing.assert_allclose(state.sq_update["code_bias"], 3.0 * 0.95)

    def test_unit_gradient_first_step_size(self):
        params, state = self._setup()
        before = params.code_bias.copy()
        grads = Gradients.zeros_like(params)
        grads.code_bias[:] = 1.0
        adadelta_step(params, grads, state, rho=0.95, eps=1e-6)
        delta = params.code_bias - before
        expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
        np.testing.assert_allclose(delta, expected, rtol=1e-12)
        assert abs(delta[0] + 0.0044721) < 1e-7

    def test_constant_gradient_decreases_monotonically(self):
        params, state = self._setup()
        grads = Gradients.zeros_like(params)
        grads.code_bias[:] = 1.0
        previous = params.code_bias[0]
        for _ in range(2):
            adadelta_step(params, grads, state)
            assert params.code_bias[0] < previous
            previous = params.code_bias[0]

    def test_non_finite_gradient_rejected(self):
        params, state = self._setup()
        grads = Gradients.zeros_like(params)
        grads.visit_weights[0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="visit_weights"):
            adadelta_step(params, grads, state)


class TestTrain:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_single_epoch_logs_one_record(self):
        corpus = toy_corpus()
        config = TrainConfig(code_dim=4, visit_dim=3, epochs=1, batch_size=4, seed=1,
                             use_grouper=False)
        params, log = train(corpus, None, config)
        assert len(log.records) == 1
        assert log.records[0].epoch == 0
        assert params.n_targets == len(corpus.vocabulary)

    def test_grouper_flag_consistency(self):
        corpus = toy_corpus()
        grouper = GrouperMap.identity(4)
        with pytest.raises(ValueError):
            train(corpus, None, TrainConfig(use_grouper=True))
        with pytest.raises(ValueError):
            train(corpus, grouper, TrainConfig(use_grouper=False))

    def test_alpha_zero_still_moves_all_arrays(self):
        corpus, grouper, _ = generate_synthetic(SynthConfig(n_patients=20, seed=3))
        config = TrainConfig(code_dim=6, visit_dim=5, epochs=2, batch_size=32, alpha=0.0, seed=2)
        params, log = train(corpus, grouper, config)
        reference = init_params(
            len(corpus.vocabulary), 6, 5, corpus.demo_dim, grouper.n_groups,
            seed=trainer_module.derive_seed(2, "init"),
        )
        for name, array in params.arrays().items():
            assert not np.array_equal(array, reference.arrays()[name]), name
        assert all(r.code_loss >= 0.0 for r in log.records)

    def test_deterministic_given_seed(self):
        corpus, grouper, _ = generate_synthetic(SynthConfig(n_patients=25, seed=4))
        config = TrainConfig(code_dim=6, visit_dim=5, epochs=2, batch_size=32, seed=9)
        params_a, log_a = train(corpus, grouper, config)
        params_b, log_b = train(corpus, grouper, config)
        for name, array in params_a.arrays().items():
            np.testing.assert_array_equal(array, params_b.arrays()[name])
        # wall-clock seconds differ between runs; the losses must not
        for rec_a, rec_b in zip(log_a.records, log_b.records):
            assert (rec_a.epoch, rec_a.total_loss, rec_a.visit_loss, rec_a.code_loss) == (
                rec_b.epoch, rec_b.total_loss, rec_b.visit_loss, rec_b.code_loss)

    def test_loss_decreases_on_default_synthetic(self, default_synth, default_trained):
        _, log = default_trained
        assert len(log.records) == 10
        assert log.records[-1].total_loss < log.records[0].total_loss

    def test_divergence_reports_coordinates(self, monkeypatch):
        corpus = toy_corpus()

        def explode(batch, params, alpha):
            raise NonFiniteLossError("visit")

        monkeypatch.setattr(trainer_module, "backward", explode)
        config = TrainConfig(code_dim=3, visit_dim=3, epochs=1, batch_size=4, use_grouper=False)
        with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
            train(corpus, None, config)

    def test_log_csv_round_trips_floats(self, tmp_path):
        corpus = toy_corpus()
        config = TrainConfig(code_dim=3, visit_dim=3, epochs=2, batch_size=4, use_grouper=False)
        _, log = train(corpus, None, config)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2
        for row, rec in zip(rows, log.records):
            assert float(row["total"]) == rec.total_loss
            assert float(row["visit"]) == rec.visit_loss
            assert float(row["code"]) == rec.code_loss

    def test_metadata_records_optimizer_settings(self):
        corpus = toy_corpus()
        config = TrainConfig(code_dim=3, visit_dim=3, epochs=1, batch_size=4, use_grouper=False)
        _, log = train(corpus, None, config)
        assert log.metadata["optimizer"] == "adadelta"
        assert log.metadata["adadelta_rho"] == 0.95
        assert log.metadata["adadelta_eps"] == 1e-6
