import json

import numpy as np
import pytest

from allfuse import models as M
from allfuse import nn
from allfuse.errors import DecodeError, MissingArtifactError, ShapeError, TrainingError
from allfuse.hyperparams import TUNED, HyperParams

FAST = HyperParams(units=128, optimizer="RMSprop", learning_rate=1e-3, momentum=0.0, dropout_rate=0.0)


def _blob_images(n_per_class, seed, size=64):
    """Bright vs dark Gaussian blobs; the mean intensity alone separates the classes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    xs, ys = [], []
    for label in (0, 1):
        for _ in range(n_per_class):
            cy, cx = rng.uniform(20, 44, size=2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 8.0 ** 2))
            amp = 0.7 if label else 0.25
            img = 0.1 + amp * blob[..., None] + rng.normal(0, 0.03, (size, size, 3))
            xs.append(np.clip(img, 0, 1))
            ys.append(label)
    order = rng.permutation(len(xs))
    return np.stack(xs).astype(np.float32)[order], np.asarray(ys)[order]


def _logistic_oracle(feats, labels, steps=3000, lr=0.5):
    f = (feats - feats.mean()) / feats.std()
    w = b = 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(w * f + b)))
        w -= lr * np.mean((p - labels) * f)
        b -= lr * np.mean(p - labels)
    return np.mean(((w * f + b) > 0) == labels)


class TestBuild:
    @pytest.mark.parametrize("arch", M.ARCHS)
    def test_deterministic_init(self, arch):
        a = M.build_model(arch, TUNED[arch], seed=3, gru_units=16)
        b = M.build_model(arch, TUNED[arch], seed=3, gru_units=16)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
            assert a.params[k].dtype == np.float32

    def test_archs_distinct(self):
        h = TUNED["a"]
        sig = {arch: {k: v.shape for k, v in M.build_model(arch, h, 0, gru_units=16).params.items()}
               for arch in M.ARCHS}
        assert sig["a"] != sig["b"] and sig["b"] != sig["c"] and sig["a"] != sig["c"]

    def test_tuned_units_set_gru_width(self):
        m = M.build_model("a", TUNED["a"], 0)
        assert m.spec.gru_units == 512
        assert m.params["gru/w_hh"].shape == (512, 512)
        assert m.spec.dense_units == (256, 2)

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            M.build_model("d", TUNED["a"], 0)

    def test_long_names_accepted(self):
        assert M.parse_arch("B_mobile_like") == "b"

    @pytest.mark.parametrize("arch", M.ARCHS)
    def test_full_resolution_input_builds(self, arch):
        spec = M.make_spec(arch, TUNED[arch], input_shape=(224, 224, 3))
        h, w, _ = M.feature_map_shape(spec)
        assert h >= 1 and w >= 1

    def test_tiny_input_rejected(self):
        with pytest.raises(ShapeError):
            M.build_model("c", TUNED["c"], 0, input_shape=(16, 16, 3))


class TestHeadContract:
    @pytest.mark.parametrize("arch", M.ARCHS)
    def test_one_gru_then_two_dense(self, arch):
        plan = M.layer_plan(M.make_spec(arch, TUNED[arch]))
        kinds = [k for k, _, _ in plan]
        assert kinds.count("gru") == 1
        after = kinds[kinds.index("gru") + 1:]
        assert after == ["dense", "dense", "softmax"]
        assert plan[-2][2]["dout"] == 2
        assert kinds[kinds.index("gru") - 2:kinds.index("gru")] == ["sequence", "dropout"]

    def test_backbones_differ(self):
        kinds = {a: [k for k, _, _ in M.layer_plan(M.make_spec(a, TUNED[a]))] for a in M.ARCHS}
        assert kinds["a"].count("branch") == 3
        assert kinds["b"].count("conv") == 6
        assert kinds["c"].count("conv") == 4 and "branch" not in kinds["c"]


class TestPredict:
    @pytest.mark.parametrize("arch", M.ARCHS)
    def test_sums_to_one(self, arch):
        m = M.build_model(arch, TUNED[arch], 1, gru_units=16)
        x = np.random.default_rng(0).random((100, 64, 64, 3))
        p = M.predict_proba(m, x)
        assert p.shape == (100, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_duplicate_inputs_identical(self):
        m = M.build_model("b", TUNED["b"], 1, gru_units=16)
        x = np.random.default_rng(1).random((1, 64, 64, 3))
        p = M.predict_proba(m, np.concatenate([x, x]))
        assert p[0].tobytes() == p[1].tobytes()

    def test_dropout_off_at_inference(self):
        h = TUNED["a"].with_overrides(dropout_rate=0.5)
        m = M.build_model("a", h, 1, gru_units=16)
        x = np.random.default_rng(2).random((3, 64, 64, 3))
        assert M.predict_proba(m, x).tobytes() == M.predict_proba(m, x).tobytes()

    def test_wrong_shape(self):
        m = M.build_model("c", TUNED["c"], 1, gru_units=16)
        with pytest.raises(ShapeError):
            M.predict_proba(m, np.zeros((2, 32, 32, 3)))

    def test_no_tape_recorded(self):
        m = M.build_model("c", TUNED["c"], 1, gru_units=16)
        with nn.no_grad():
            out = M.forward(m.spec, m.params, np.zeros((1, 64, 64, 3), np.float32))
        assert out._backward is None


class TestTrain:
    def test_zero_epochs_returns_initial(self):
        m = M.build_model("c", FAST, 0, gru_units=16)
        x, y = _blob_images(4, 0)
        t = M.train(m, (x, y), (x, y), epochs=0, batch_size=4)
        assert t.history == []
        for k in m.params:
            assert t.params[k].tobytes() == m.params[k].tobytes()

    def test_validation(self):
        m = M.build_model("c", FAST, 0, gru_units=16)
        x, y = _blob_images(2, 0)
        with pytest.raises(ValueError):
            M.train(m, (x, y), (x, y), epochs=1, batch_size=5)
        with pytest.raises(ValueError):
            M.train(m, (x[:0], y[:0]), (x, y), epochs=1, batch_size=1)

    def test_deterministic_history(self):
        x, y = _blob_images(6, 1)
        h = FAST.with_overrides(dropout_rate=0.3)
        runs = [M.train(M.build_model("a", h, 5, gru_units=16), (x, y), (x, y), 2, 4) for _ in range(2)]
        assert runs[0].history == runs[1].history
        for k in runs[0].params:
            assert runs[0].params[k].tobytes() == runs[1].params[k].tobytes()

    def test_best_checkpoint_contract(self):
        x, y = _blob_images(10, 2)
        xv, yv = _blob_images(5, 3)
        t = M.train(M.build_model("b", FAST, 2, gru_units=16), (x, y), (xv, yv), 4, 5)
        assert len(t.history) == 4
        best = min(r["val_loss"] for r in t.history)
        loss, _ = M.evaluate_loss(t, xv, yv)
        assert loss == pytest.approx(best, rel=1e-5)

    def test_separable_blobs(self):
        x, y = _blob_images(40, 4)
        xv, yv = _blob_images(20, 5)
        # a one-feature logistic regression on pixel means already separates the task
        assert _logistic_oracle(xv.mean(axis=(1, 2, 3)), yv) >= 0.95
        t = M.train(M.build_model("c", FAST, 0, gru_units=16), (x, y), (xv, yv), 20, 16,
                    stop=lambda r: r["val_acc"] >= 0.95)
        assert max(r["val_acc"] for r in t.history) >= 0.95

    def test_divergence_reports_epoch_and_batch(self):
        x, y = _blob_images(4, 6)
        m = M.build_model("c", FAST, 0, gru_units=16)
        x = x.copy()
        x[5] = np.nan
        with pytest.raises(TrainingError) as ei:
            M.train(m, (x, y), (x[:2], y[:2]), 1, 2)
        assert ei.value.epoch == 0 and ei.value.batch is not None

    @pytest.mark.parametrize("arch", M.ARCHS)
    @pytest.mark.parametrize("seed", range(3))
    def test_overfit_eight_samples(self, arch, seed):
        x, y = _blob_images(4, 10 + seed)
        x = x + np.random.default_rng(seed).normal(0, 0.05, x.shape).astype(np.float32)
        m = M.build_model(arch, FAST, seed, gru_units=16)
        # mean CE below ln2/8 forces p(true) > 0.5 on every one of the 8 samples, and the
        # returned best-loss snapshot is at least that good
        t = M.train(m, (x, y), (x, y), 200, 8, stop=lambda r: r["val_loss"] < np.log(2) / 8)
        assert M.evaluate_loss(t, x, y)[1] == 1.0

    def test_overfit_one_sample(self):
        x, y = _blob_images(1, 7)
        m = M.build_model("a", FAST, 0, gru_units=16)
        t = M.train(m, (x[:1], y[:1]), (x[:1], y[:1]), 200, 1,
                    stop=lambda r: r["val_loss"] < -np.log(0.995))
        assert M.predict_proba(t, x[:1])[0, y[0]] >= 0.99


class TestPersistence:
    def test_round_trip(self, tmp_path):
        x, y = _blob_images(3, 0)
        t = M.train(M.build_model("a", TUNED["a"], 4, gru_units=16), (x, y), (x, y), 1, 3)
        ck, side = M.save_model(t, tmp_path / "m.afck")
        meta = json.loads(side.read_text())
        assert set(meta) >= {"arch", "hyperparams", "seed", "history"}
        back = M.load_model(ck)
        assert back.spec == t.spec and back.seed == 4 and back.history == t.history
        assert M.predict_proba(back, x).tobytes() == M.predict_proba(t, x).tobytes()

    def test_save_is_byte_stable(self, tmp_path):
        m = M.build_model("b", TUNED["b"], 4, gru_units=16)
        M.save_model(m, tmp_path / "1.afck")
        M.save_model(m, tmp_path / "2.afck")
        assert (tmp_path / "1.afck").read_bytes() == (tmp_path / "2.afck").read_bytes()
        assert (tmp_path / "1.afck.json").read_bytes() == (tmp_path / "2.afck.json").read_bytes()

    def test_missing_sidecar(self, tmp_path):
        m = M.build_model("b", TUNED["b"], 4, gru_units=16)
        ck, side = M.save_model(m, tmp_path / "m.afck")
        side.unlink()
        with pytest.raises(MissingArtifactError):
            M.load_model(ck)

    def test_spec_mismatch(self, tmp_path):
        ck, side = M.save_model(M.build_model("b", TUNED["b"], 4, gru_units=16), tmp_path / "m.afck")
        meta = json.loads(side.read_text())
        meta["spec"]["gru_units"] = 32
        side.write_text(json.dumps(meta))
        with pytest.raises(DecodeError):
            M.load_model(ck)
