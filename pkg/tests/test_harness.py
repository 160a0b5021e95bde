import numpy as np
import pytest

import mixupmil.harness as harness
from mixupmil.augment import AugmentConfig
from mixupmil.bagstore import BagDataset, DatasetError, FeatureBag, SyntheticSpec, generate_synthetic, one_hot
from mixupmil.harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    TrainingError,
    evaluate,
    format_results_csv,
    load_config,
    parse_config_text,
    run_experiment,
    run_repeat,
    split_dataset,
    train_model,
)
from mixupmil.mil_models import init_model, predict
from mixupmil.rng import RngStream


def tiny_dataset(counts, p=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    bags = []
    for c, n in enumerate(counts):
        for b in range(n):
            bags.append(FeatureBag(f"c{c}_{b}", one_hot(c, len(counts)), rng.normal(size=(p, d))))
    return BagDataset(tuple(bags), tuple(f"k{c}" for c in range(len(counts))))


@pytest.fixture(scope="module")
def separable():
    return generate_synthetic(SyntheticSpec(bags_per_class=20, patches_per_bag=16, dim=8), RngStream(1))


class TestSplit:
    def test_five_and_five(self):
        train, test = split_dataset(tiny_dataset([5, 5]), 0.8, RngStream(0))
        assert len(train) == 8 and len(test) == 2
        assert np.bincount(train.class_indices()).tolist() == [4, 4]
        assert np.bincount(test.class_indices()).tolist() == [1, 1]

    def test_half(self):
        train, test = split_dataset(tiny_dataset([4, 4]), 0.5, RngStream(0))
        assert np.bincount(train.class_indices()).tolist() == [2, 2]
        assert np.bincount(test.class_indices()).tolist() == [2, 2]

    def test_round_half_up(self):
        # 0.5 * 5 = 2.5 -> 3 training bags
        train, _ = split_dataset(tiny_dataset([5, 3]), 0.5, RngStream(0))
        assert np.bincount(train.class_indices()).tolist() == [3, 2]

    def test_partition_property(self):
        rng = np.random.default_rng(42)
        for trial in range(1000):
            counts = rng.integers(2, 9, size=rng.integers(2, 4)).tolist()
            ds = tiny_dataset(counts, p=1, d=1, seed=trial)
            f = float(rng.uniform(0.05, 0.95))
            train, test = split_dataset(ds, f, RngStream(trial))
            tr, te = {b.id for b in train.bags}, {b.id for b in test.bags}
            assert tr.isdisjoint(te) and tr | te == {b.id for b in ds.bags}
            expect = [int(np.floor(f * n + 0.5)) for n in counts]
            assert np.bincount(train.class_indices(), minlength=len(counts)).tolist() == expect

    def test_deterministic(self):
        ds = tiny_dataset([6, 6])
        a, _ = split_dataset(ds, 0.8, RngStream(3))
        b, _ = split_dataset(ds, 0.8, RngStream(3))
        assert [x.id for x in a.bags] == [x.id for x in b.bags]

    def test_small_class(self):
        with pytest.raises(DatasetError, match="k1"):
            split_dataset(tiny_dataset([5, 1]), 0.8, RngStream(0))

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.2])
    def test_bad_fraction(self, f):
        with pytest.raises(ValueError):
            split_dataset(tiny_dataset([3, 3]), f, RngStream(0))


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.epochs, cfg.lr, cfg.repeats, cfg.train_fraction) == (200, 2e-4, 32, 0.8)

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"repeats": 0}, {"train_fraction": 1.0}, {"lr": 0.0},
                                    {"model": "mlp"}, {"bags_per_class": 0}])
    def test_invariants(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_parse_and_override(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# comment\n\nmodel = dsmil\naugment.mode=intra-linear\naugment.beta=0.25\nepochs=10\n")
        cfg = load_config(path, {"epochs": "3", "bags_per_class": "16"})
        assert cfg.model == "dsmil" and cfg.epochs == 3 and cfg.bags_per_class == 16
        assert cfg.augment == AugmentConfig("intra-linear", 0.25)

    def test_text_roundtrip(self):
        cfg = ExperimentConfig(dataset="d", model="dsmil", augment=AugmentConfig("inter-v1", 0.5), epochs=7,
                               patches_per_bag=12)
        assert ExperimentConfig.from_mapping(parse_config_text(cfg.to_text())) == cfg

    def test_errors(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_mapping({"epoch": "3"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping({"epochs": "three"})
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("model=abmil\nnonsense\n")
        with pytest.raises(ValueError):
            ExperimentConfig.from_mapping({"augment.mode": "cutmix"})


class TestTraining:
    # the max-instance stream of the dual-stream head needs about twice as many
    # epochs as the gated head to reach the same loss at lr 2e-4
    @pytest.mark.parametrize("kind,epochs", [("abmil", 50), ("dsmil", 100)])
    def test_converges_on_separable_data(self, kind, epochs):
        ds = generate_synthetic(SyntheticSpec(), RngStream(0))
        train, test = split_dataset(ds, 0.8, RngStream(0))
        res = train_model(kind, train, ExperimentConfig(model=kind, epochs=epochs), RngStream(0))
        assert all(np.isfinite(res.losses))
        assert res.losses[-1] < 0.1
        assert res.iterations == [len(train)] * epochs
        # nearest-centroid oracle on bag means
        centroids = np.stack([np.mean([b.features.mean(0) for b in train.bags if b.class_index == c], 0)
                              for c in range(2)])
        oracle = [int(np.argmin(np.linalg.norm(centroids - b.features.mean(0), axis=1))) for b in test.bags]
        agree = np.mean([predict(res.model, b)[0] == o for b, o in zip(test.bags, oracle)])
        assert agree >= 0.95

    def test_non_finite_loss_aborts(self, separable, monkeypatch):
        monkeypatch.setattr(harness, "loss_and_grads", lambda m, b, t: (float("nan"), {}))
        with pytest.raises(TrainingError, match="epoch 0"):
            train_model("abmil", separable, ExperimentConfig(epochs=2), RngStream(0))

    def test_test_bags_are_never_augmented(self, separable, monkeypatch):
        seen = []
        real = harness.build_epoch_bags

        def spy(ds, cfg, rng):
            seen.append({b.id for b in ds.bags})
            return real(ds, cfg, rng)

        monkeypatch.setattr(harness, "build_epoch_bags", spy)
        cfg = ExperimentConfig(epochs=2, augment=AugmentConfig("inter-v2"))
        out = run_repeat(separable, cfg, 0)
        train, test = split_dataset(separable, 0.8, RngStream(0))
        assert all(s == {b.id for b in train.bags} for s in seen)
        assert out.row.test_size == len(test)


class TestEvaluate:
    def _constant(self, cls):
        m = init_model("abmil", 4, 2, RngStream(0))
        m.params["classifier.weight"][:] = 0
        m.params["classifier.bias"][:] = [10, -10] if cls == 0 else [-10, 10]
        return m

    def test_constant_predictor(self):
        ev = evaluate(self._constant(0), tiny_dataset([3, 7]))
        assert ev.accuracy == pytest.approx(0.3)
        np.testing.assert_array_equal(ev.confusion, [[3, 0], [7, 0]])
        np.testing.assert_array_equal(ev.per_class, [1.0, 0.0])

    def test_missing_class_is_nan(self):
        ds = tiny_dataset([3, 2]).subset([0, 1, 2])
        ev = evaluate(self._constant(1), ds)
        assert ev.accuracy == 0.0 and np.isnan(ev.per_class[1])

    def test_perfect_predictor(self):
        ds = generate_synthetic(SyntheticSpec(bags_per_class=5, patches_per_bag=4, dim=4), RngStream(2))
        m = init_model("abmil", 4, 2, RngStream(0))
        m.params["classifier.weight"][:] = [[1, 1, 0, 0], [-1, -1, 0, 0]]
        m.params["classifier.bias"][:] = 0
        m.params["attn_w"][:] = 0  # uniform attention: z is the bag mean
        # class 0 centres on +4 e_0 and class 1 on -4 e_1, so the sign of x_0 + x_1 separates them
        ev = evaluate(m, ds)
        assert ev.accuracy == 1.0
        np.testing.assert_array_equal(ev.confusion, np.diag([5, 5]))

    def test_accuracy_is_trace_ratio(self):
        ds = tiny_dataset([6, 4, 5], d=4)
        for seed in range(5):
            ev = evaluate(init_model("dsmil", 4, 3, RngStream(seed)), ds)
            assert ev.accuracy == np.trace(ev.confusion) / ev.confusion.sum()

    def test_soft_label_rejected(self):
        bag = FeatureBag("mix", np.array([0.5, 0.5]), np.zeros((2, 4)), origin="inter-mix")
        ds = BagDataset((bag,), ("a", "b"))
        with pytest.raises(DatasetError, match="soft label"):
            evaluate(init_model("abmil", 4, 2, RngStream(0)), ds)


class TestExperiment:
    def test_rows_seeds_and_summary(self, separable):
        cfg = ExperimentConfig(epochs=1, repeats=3, base_seed=10)
        res = run_experiment(cfg, separable)
        assert [r.seed for r in res.rows] == [10, 11, 12]
        acc = np.array([r.accuracy for r in res.rows])
        assert res.mean == pytest.approx(acc.mean())
        assert res.std == pytest.approx(acc.std(ddof=1))

    def test_repeats_are_rerunnable(self, separable):
        cfg = ExperimentConfig(epochs=2, repeats=3, model="dsmil")
        full = run_experiment(cfg, separable)
        again = run_repeat(separable, cfg, 2).row
        assert again == full.rows[2]

    def test_subsampling_pool_size(self, separable):
        cfg = ExperimentConfig(epochs=1, repeats=2, bags_per_class=16, patches_per_bag=8)
        for r in run_experiment(cfg, separable).rows:
            assert r.train_size + r.test_size == 32
            assert (r.train_size, r.test_size) == (26, 6)

    def test_csv(self, separable):
        cfg = ExperimentConfig(epochs=1, repeats=2, output="/somewhere/else.csv")
        text = format_results_csv(run_experiment(cfg, separable), cfg)
        lines = text.splitlines()
        data = [ln for ln in lines if not ln.startswith("#")]
        assert data[0] == "repeat,seed,accuracy,acc_class_0,acc_class_1,train_size,test_size"
        assert len(data) == 3
        assert any("n-1" in ln for ln in lines if ln.startswith("#"))
        assert "/somewhere" not in text
        assert lines[-3].startswith("# summary mean_accuracy=")

    def test_errors_carry_repeat_index(self):
        ds = tiny_dataset([1, 5])
        with pytest.raises(ExperimentError) as info:
            run_experiment(ExperimentConfig(epochs=1, repeats=2), ds)
        assert info.value.repeat == 0 and isinstance(info.value.cause, DatasetError)
