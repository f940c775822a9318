import math

import numpy as np
import pytest

from gmixer.graphs import DatasetSplit, compute_degree_stats, pad_batch, split_dataset
from gmixer.model import GmnModel
from gmixer.params import adam_step
from gmixer.synth import generate
from gmixer.tensor import ComputeTape, Tensor, backward
from gmixer.training import (TrainConfig, TrainingDiverged, evaluate, l1_loss, load_config,
                             parse_config_text, train)

SMALL = dict(num_layers=1, d=8, d_e=4, n_max=10, token_hidden=8, channel_hidden=16, readout_hidden=8,
             batch_size=8, precision=64)


@pytest.fixture(scope="module")
def small_data():
    gs = generate(40, seed=5, n_min=4, n_max=10)
    split = split_dataset(gs, (0.6, 0.2, 0.2), seed=0)
    return split, compute_degree_stats(split.train).delta


class TestL1:
    def test_zero_on_match(self):
        assert l1_loss(Tensor([1.0, -2.0]), [1.0, -2.0]).item() == 0.0

    def test_hand_example(self):
        assert l1_loss(Tensor([1.0, 3.0]), [0.0, 0.0]).item() == 2.0

    def test_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 30))
            p, t = rng.normal(size=n), rng.normal(size=n)
            expect = sum(abs(a - b) for a, b in zip(p.tolist(), t.tolist())) / n
            assert abs(l1_loss(Tensor(p), t).item() - expect) < 1e-12

    def test_tie_subgradient_is_zero(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with ComputeTape() as tape:
            loss = l1_loss(p, [1.0, 0.0])
        (g,) = backward(tape, loss, wrt=[p])
        assert g.tolist() == [0.0, 0.5]

    def test_errors(self):
        with pytest.raises(ValueError):
            l1_loss(Tensor(np.zeros(0)), np.zeros(0))
        with pytest.raises(ValueError):
            l1_loss(Tensor([1.0]), [1.0, 2.0])


class TestEvaluate:
    def test_predict_zero_model(self, small_data):
        split, delta = small_data
        model = GmnModel(TrainConfig(**SMALL).architecture(split.vocab_atoms, split.vocab_bonds, delta))
        for p in model.registry:
            p.set_value(np.zeros(p.shape))
        m = math.fsum(abs(g.target) for g in split.train) / len(split.train)
        assert evaluate(model, split.train) == pytest.approx(m, abs=1e-12)

    def test_deterministic_and_batch_independent(self, small_data):
        split, delta = small_data
        model = GmnModel(TrainConfig(**SMALL).architecture(split.vocab_atoms, split.vocab_bonds, delta), seed=3)
        a = evaluate(model, split.train, 5)
        assert evaluate(model, split.train, 5) == a
        assert evaluate(model, split.train, 64) == pytest.approx(a, abs=1e-12)

    def test_oversized_graph(self, small_data):
        split, delta = small_data
        model = GmnModel(TrainConfig(**{**SMALL, "n_max": 5}).architecture(split.vocab_atoms, split.vocab_bonds, delta))
        with pytest.raises(ValueError, match="n_max"):
            evaluate(model, split.train)


class TestTrain:
    def test_zero_epochs(self, small_data):
        split, delta = small_data
        model, history = train(TrainConfig(**SMALL, max_epochs=0), split, delta)
        assert history == []
        fresh = GmnModel(model.arch, seed=0, dtype=np.float64)
        for p, q in zip(model.registry, fresh.registry):
            np.testing.assert_array_equal(p.data, q.data)

    def test_deterministic(self, small_data):
        split, delta = small_data
        cfg = TrainConfig(**SMALL, max_epochs=3, seed=4)
        _, h1 = train(cfg, split, delta)
        _, h2 = train(cfg, split, delta)
        strip = [(m.epoch, m.train_loss, m.val_mae, m.test_mae) for m in h1]
        assert strip == [(m.epoch, m.train_loss, m.val_mae, m.test_mae) for m in h2]

    def test_early_stopping_invariants(self, small_data):
        split, delta = small_data
        seen = []
        cfg = TrainConfig(**SMALL, max_epochs=30, patience=2, lr=3e-2)
        model, history = train(cfg, split, delta, on_epoch=lambda m, mdl, imp: seen.append((m, imp)))
        assert 1 <= len(history) <= 30
        best = min(m.val_mae for m in history)
        assert evaluate(model, split.validation) == pytest.approx(best, abs=1e-12)
        walls = [m.wall_seconds for m in history]
        assert walls[0] > 0 and walls == sorted(walls)
        for m, improved in seen:
            assert (m.test_mae is not None) == improved
        if len(history) < 30:
            tail = [imp for _, imp in seen[-2:]]
            assert not any(tail)

    def test_single_step_decreases_loss(self, small_data):
        split, delta = small_data
        arch = TrainConfig(**SMALL).architecture(split.vocab_atoms, split.vocab_bonds, delta)
        for k in range(10):
            model = GmnModel(arch, seed=k)
            batch = pad_batch([split.train[k]], arch.n_max)
            with ComputeTape() as tape:
                loss = l1_loss(model(batch), batch.targets)
            backward(tape, loss)
            adam_step(model.registry, lr=1e-5)
            after = l1_loss(model(batch), batch.targets).item()
            assert after < loss.item()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_aborts_with_diagnostic(self, small_data):
        split, delta = small_data
        with pytest.raises(TrainingDiverged, match=r"batch \d+.*param norm"):
            train(TrainConfig(**SMALL, max_epochs=2, lr=1e305), split, delta)

    def test_empty_validation_uses_train(self, small_data):
        split, delta = small_data
        only_train = DatasetSplit(split.train, [], [], split.vocab_atoms, split.vocab_bonds)
        model, history = train(TrainConfig(**SMALL, max_epochs=2), only_train, delta)
        assert history[-1].test_mae is None or history[-1].test_mae >= 0
        assert min(m.val_mae for m in history) == pytest.approx(evaluate(model, split.train), abs=1e-12)


class TestConfig:
    def test_invariants(self):
        for bad in (dict(batch_size=0), dict(patience=0), dict(lr=0.0), dict(precision=16)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    def test_parse_text(self):
        text = "# comment\nlr = 0.01  # inline\n\nbatch-size=4\n"
        assert parse_config_text(text) == {"lr": "0.01", "batch_size": "4"}
        with pytest.raises(ValueError, match="line 1"):
            parse_config_text("oops")

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("lr = 0.01\nd = 32\nactivation = relu\n")
        cfg = load_config(p, {"d": 16})
        assert (cfg.lr, cfg.d, cfg.activation, cfg.batch_size) == (0.01, 16, "relu", 32)
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(None, {"bogus": 1})

    def test_every_field_addressable(self):
        cfg = TrainConfig()
        text = "\n".join(f"{k} = {v}" for k, v in vars(cfg).items())
        assert load_config_from_text(text) == cfg


def load_config_from_text(text):
    return TrainConfig.from_mapping(parse_config_text(text))
