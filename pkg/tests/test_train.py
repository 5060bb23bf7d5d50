import numpy as np
import numpy.testing as npt
import pytest

import voxelstream.networks as networks_mod
from voxelstream.data import Dataset, SynthConfig, batch_arrays, gen_synthetic
from voxelstream.errors import ContractError, NumericalError
from voxelstream.networks import NetworkSpec, build_model
from voxelstream.ops3d import softmax_cross_entropy, voxel_flow_loss
from voxelstream.tensor import Tape, Tensor
from voxelstream.train import (METRICS_HEADER, Metrics, TrainConfig, benchmark_fps,
                               deterministic_mode, evaluate, fit_linear_classifier,
                               inference_forward, sgd_step, train, write_metrics_csv)

MICRO = dict(num_classes=3, clip=(3, 4, 8, 8), width_factor=1 / 32,
             pooling=((1, 2, 2), (2, 2, 2), None, None, None))


@pytest.fixture(scope="module")
def tiny_ds():
    cfg = SynthConfig(num_classes=3, clips_per_class=4, frames=4, height=8,
                      width=8, min_shape=3, max_shape=4, default_speed=1.0, seed=5)
    return gen_synthetic(cfg)


def _params(seed=0, shapes=((3, 2), (4,))):
    rng = np.random.default_rng(seed)
    return {f"p{i}": Tensor(rng.standard_normal(s), requires_grad=True)
            for i, s in enumerate(shapes)}


class TestSgdStep:
    def test_lr_zero_leaves_params(self):
        params = _params()
        before = {k: p.data.copy() for k, p in params.items()}
        grads = {k: np.ones_like(p.data) for k, p in params.items()}
        cfg = TrainConfig(learning_rate=0.0, momentum=0.9, weight_decay=0.1, epochs=1)
        sgd_step(params, grads, {}, cfg)
        for k, p in params.items():
            npt.assert_array_equal(p.data, before[k])

    def test_vanilla_sgd_exact(self):
        params = _params(1)
        before = {k: p.data.copy() for k, p in params.items()}
        grads = {k: np.full_like(p.data, 0.5) for k, p in params.items()}
        cfg = TrainConfig(learning_rate=0.2, momentum=0.0, weight_decay=0.0, epochs=1)
        sgd_step(params, grads, {}, cfg)
        for k, p in params.items():
            npt.assert_array_equal(p.data, before[k] - 0.2 * 0.5)

    def test_quadratic_bowl_matches_recurrence(self):
        # f = 0.5*||p||^2 so g = p; iterate the v/p recurrence by hand
        p0 = np.array([1.0, -2.0, 0.5])
        params = {"p": Tensor(p0.copy(), requires_grad=True)}
        cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0, epochs=1)
        state = {}
        p_ref, v_ref = p0.copy(), np.zeros_like(p0)
        for _ in range(10):
            sgd_step(params, {"p": params["p"].data.copy()}, state, cfg)
            v_ref = 0.9 * v_ref - 0.1 * p_ref
            p_ref = p_ref + v_ref
            npt.assert_allclose(params["p"].data, p_ref, rtol=0, atol=1e-12)

    def test_weight_decay_term(self):
        params = {"p": Tensor(np.array([2.0]), requires_grad=True)}
        cfg = TrainConfig(learning_rate=0.5, momentum=0.0, weight_decay=0.1, epochs=1)
        sgd_step(params, {"p": np.array([0.0])}, {}, cfg)
        npt.assert_allclose(params["p"].data, [2.0 - 0.5 * 0.1 * 2.0])

    def test_nonfinite_gradient_names_parameter(self):
        params = _params(2)
        grads = {k: np.zeros_like(p.data) for k, p in params.items()}
        grads["p1"][0] = np.inf
        with pytest.raises(NumericalError, match="p1"):
            sgd_step(params, grads, {}, TrainConfig(epochs=1))

    def test_shape_mismatch_rejected(self):
        params = {"p": Tensor(np.zeros(3), requires_grad=True)}
        with pytest.raises(ContractError):
            sgd_step(params, {"p": np.zeros(4)}, {}, TrainConfig(epochs=1))


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        dict(learning_rate=-1.0), dict(lambda_flow=-0.1), dict(batch_size=0),
        dict(epochs=0), dict(scheme="warmup"), dict(phase_fractions=(0.5, 0.5)),
        dict(lr_decay=0.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            TrainConfig(**kw)


class TestTrainLoop:
    def test_lr_zero_epoch_keeps_weights_and_reports(self, tiny_ds):
        model = build_model("twostream", NetworkSpec(**MICRO), seed=0)
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        cfg = TrainConfig(learning_rate=0.0, epochs=1, seed=0)
        history = train(model, tiny_ds, cfg)
        assert len(history) == 1
        m = history[0]
        assert m.epoch == 1 and 0 <= m.train_acc <= 1 and 0 <= m.test_acc <= 1
        assert np.isfinite([m.cls_loss, m.flow_mse, m.flow_epe]).all()
        assert m.fps == 0.0
        for k, p in model.parameters().items():
            npt.assert_array_equal(p.data, before[k])

    def test_lambda_zero_is_classification_only(self, tiny_ds):
        # the decoder is outside the recorded graph: zero grads, zero updates
        model = build_model("combined", NetworkSpec(**MICRO), seed=1)
        clips, _, labels = batch_arrays(tiny_ds.train)
        model.zero_grad()
        with Tape() as tape:
            out = model.forward(Tensor(clips[:4]), with_flow=False)
            loss = softmax_cross_entropy(out.logits, labels[:4])
            tape.backward(loss, params=model.parameters().values())
        for name, p in model.parameters().items():
            if name.startswith("decoder."):
                npt.assert_array_equal(p.grad, 0.0)
        assert np.abs(model.parameters()["encoder.conv1.w"].grad).max() > 0

        dec_before = {k: p.data.copy() for k, p in model.parameters().items()
                      if k.startswith("decoder.")}
        cfg = TrainConfig(epochs=1, lambda_flow=0.0, weight_decay=0.0, seed=0)
        train(model, tiny_ds, cfg)
        for k, v in dec_before.items():
            npt.assert_array_equal(model.parameters()[k].data, v)

    def test_lambda_monotonicity_at_init(self, tiny_ds):
        # the flow share of the shared-encoder gradient grows with lambda
        clips, flows, labels = batch_arrays(tiny_ds.train, np.float64)
        shares = []
        for lam in (0.5, 2.0):
            model = build_model("combined", NetworkSpec(**MICRO), seed=3,
                                dtype=np.float64)
            enc = [k for k in model.parameters() if k.startswith("encoder.")]
            model.zero_grad()
            with Tape() as tape:
                out = model.forward(Tensor(clips[:6]))
                floss, _ = voxel_flow_loss(out.flow, Tensor(flows[:6]))
                tape.backward(floss, params=model.parameters().values())
            gf = {k: model.parameters()[k].grad.copy() for k in enc}
            model.zero_grad()
            with Tape() as tape:
                out = model.forward(Tensor(clips[:6]), with_flow=False)
                closs = softmax_cross_entropy(out.logits, labels[:6])
                tape.backward(closs, params=model.parameters().values())
            gc = {k: model.parameters()[k].grad.copy() for k in enc}
            flow_norm = np.sqrt(sum(((lam * gf[k]) ** 2).sum() for k in enc))
            tot_norm = np.sqrt(sum(((gc[k] + lam * gf[k]) ** 2).sum() for k in enc))
            shares.append(flow_norm / tot_norm)
        assert 0 < shares[0] < shares[1]

    def test_twostream_stream_isolation(self, tiny_ds):
        # flow loss never reaches the appearance encoder; CE reaches both
        model = build_model("twostream", NetworkSpec(**MICRO), seed=2)
        clips, flows, labels = batch_arrays(tiny_ds.train)
        model.zero_grad()
        with Tape() as tape:
            out = model.forward(Tensor(clips[:4]))
            loss, _ = voxel_flow_loss(out.flow, Tensor(flows[:4]))
            tape.backward(loss, params=model.parameters().values())
        params = model.parameters()
        for name, p in params.items():
            if name.startswith("appearance."):
                npt.assert_array_equal(p.grad, 0.0)
        assert np.abs(params["motion.conv1.w"].grad).max() > 0

        model.zero_grad()
        with Tape() as tape:
            out = model.forward(Tensor(clips[:4]), with_flow=False)
            tape.backward(softmax_cross_entropy(out.logits, labels[:4]),
                          params=params.values())
        assert np.abs(params["appearance.conv1.w"].grad).max() > 0
        assert np.abs(params["motion.conv1.w"].grad).max() > 0

    def test_three_phase_freezes_appearance_first(self, tiny_ds):
        model = build_model("initial", NetworkSpec(**MICRO), seed=4)
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        train(model, tiny_ds, TrainConfig(epochs=1, seed=0))   # epoch 1 = phase 1
        after = model.parameters()
        for k in before:
            if k.startswith(("appearance.", "head.")):
                npt.assert_array_equal(after[k].data, before[k])
        assert not np.array_equal(after["motion.conv1.w"].data, before["motion.conv1.w"])
        assert not np.array_equal(after["decoder.flow.w"].data, before["decoder.flow.w"])

    def test_nan_loss_aborts_with_location(self, tiny_ds):
        model = build_model("combined", NetworkSpec(**MICRO), seed=0)
        model.cls_head.w.data[:] = np.nan
        with pytest.raises(NumericalError, match="epoch 1, batch 0"):
            train(model, tiny_ds, TrainConfig(epochs=1, seed=0))

    def test_empty_split_rejected(self, tiny_ds):
        model = build_model("combined", NetworkSpec(**MICRO), seed=0)
        with pytest.raises(ContractError):
            train(model, Dataset([], tiny_ds.test), TrainConfig(epochs=1))

    def test_clip_mismatch_rejected(self, tiny_ds):
        spec = NetworkSpec(num_classes=3, clip=(3, 4, 16, 16), width_factor=1 / 32,
                           pooling=((1, 2, 2), (2, 2, 2), None, None, None))
        model = build_model("combined", spec, seed=0)
        with pytest.raises(ContractError):
            train(model, tiny_ds, TrainConfig(epochs=1))

    def test_seed_determinism(self, tiny_ds):
        rows = []
        for _ in range(2):
            model = build_model("twostream", NetworkSpec(**MICRO), seed=7)
            with deterministic_mode():
                history = train(model, tiny_ds, TrainConfig(epochs=2, seed=7))
            rows.append([m.csv_row() for m in history])
        assert rows[0] == rows[1]


class TestEvaluate:
    def test_matches_train_measurement(self, tiny_ds):
        model = build_model("combined", NetworkSpec(**MICRO), seed=1)
        history = train(model, tiny_ds, TrainConfig(epochs=1, seed=1))
        acc, epe = evaluate(model, tiny_ds.test)
        assert acc == history[-1].test_acc
        assert 0 <= acc <= 1 and epe >= 0

    def test_no_tape_pollution(self, tiny_ds):
        model = build_model("combined", NetworkSpec(**MICRO), seed=1)
        with Tape() as tape:
            evaluate(model, tiny_ds.test)
            assert len(tape) == 0

    def test_empty_split_rejected(self):
        model = build_model("combined", NetworkSpec(**MICRO), seed=1)
        with pytest.raises(ContractError):
            evaluate(model, [])


class TestLinearClassifier:
    def test_separable_two_class(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(-3.0, 0.3, size=(20, 2))
        x1 = rng.normal(3.0, 0.3, size=(20, 2))
        feats = np.vstack([x0, x1])
        labels = np.array([0] * 20 + [1] * 20)
        clf = fit_linear_classifier(feats, labels)
        assert clf.accuracy(feats, labels) == 1.0

    def test_identical_features_fall_to_chance(self):
        feats = np.ones((40, 6))
        labels = np.tile(np.arange(4), 10)
        clf = fit_linear_classifier(feats, labels)
        # every score row is identical; argmax ties resolve to class 0
        npt.assert_array_equal(clf.predict(feats), 0)
        assert clf.accuracy(feats, labels) == pytest.approx(0.25)

    def test_single_class_rejected(self):
        with pytest.raises(ContractError):
            fit_linear_classifier(np.ones((5, 3)), np.zeros(5, dtype=int))

    def test_fewer_samples_than_classes_rejected(self):
        with pytest.raises(ContractError):
            fit_linear_classifier(np.eye(3)[:2], np.array([0, 2]))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((30, 5))
        labels = rng.integers(0, 3, size=30)
        a = fit_linear_classifier(feats, labels)
        b = fit_linear_classifier(feats, labels)
        npt.assert_array_equal(a.weights, b.weights)
        npt.assert_array_equal(a.biases, b.biases)


class TestBenchmark:
    def test_fps_positive_and_runs_floor(self):
        model = build_model("combined", NetworkSpec(**MICRO), seed=0)
        assert benchmark_fps(model, batch=1, runs=20, warmup=1) > 0
        with pytest.raises(ContractError):
            benchmark_fps(model, runs=19)

    def test_longer_clips_process_fewer_clips_per_second(self):
        short = NetworkSpec(**MICRO)
        long = NetworkSpec(num_classes=3, clip=(3, 8, 8, 8), width_factor=1 / 32,
                           pooling=((1, 2, 2), (2, 2, 2), None, None, None))
        cps = {}
        for tag, spec in (("short", short), ("long", long)):
            model = build_model("combined", spec, seed=0)
            fps = benchmark_fps(model, batch=1, runs=20, warmup=2)
            cps[tag] = fps / spec.clip[1]
        assert cps["long"] < cps["short"]

    def test_classification_only_skips_decoder(self, monkeypatch):
        counts = {"deconv3d": 0}
        real = networks_mod.deconv3d

        def counting(*args, **kwargs):
            counts["deconv3d"] += 1
            return real(*args, **kwargs)

        monkeypatch.setattr(networks_mod, "deconv3d", counting)
        spec = NetworkSpec(**MICRO)
        clips = Tensor(np.random.default_rng(0).random(
            (1,) + tuple(spec.clip), dtype=np.float32))
        for variant in ("combined", "twostream"):
            model = build_model(variant, spec, seed=0)
            counts["deconv3d"] = 0
            inference_forward(model, clips)
            assert counts["deconv3d"] == 0
            inference_forward(model, clips, request_flow=True)
            assert counts["deconv3d"] > 0


class TestMetricsCsv:
    def test_header_and_rows(self, tmp_path):
        rows = [Metrics(1, 1.5, 0.25, 0.12, 0.5, 0.4, 0.0),
                Metrics(2, 1.0, 0.20, 0.10, 0.8, 0.7, 0.0)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(str(path), rows)
        lines = path.read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 3
        fields = lines[1].split(",")
        assert fields[0] == "1" and float(fields[1]) == 1.5 and float(fields[-1]) == 0.0
