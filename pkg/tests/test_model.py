import dataclasses

import numpy as np
import pytest

from repflownet import autodiff as ad
from repflownet.model import (
    FULL_SCALE_PROFILE,
    SWEEPS,
    CheckpointError,
    ModelConfig,
    Split,
    SyntheticDatasetConfig,
    TinyBackbone,
    TrainConfig,
    TrainingDivergedError,
    TwoStreamModel,
    ablate,
    cross_entropy,
    decode,
    desk_profile,
    encode,
    evaluate,
    flow_stream_forward,
    fuse,
    load,
    rgb_stream_forward,
    save,
    shuffle_frames,
    synth_dataset,
    train,
)
from repflownet.model.training import train_pipeline

from gradutil import check_with_resampling, failures

TINY = ModelConfig(n_classes=4, backbone_stages=(4, 8), convlstm_hidden=4, flow_stem_channels=(), flow_layers=1,
                   reduce_channels=2, n_iters=5, flow_tail_channels=(4,))
SMALL_DATA = SyntheticDatasetConfig(image_size=16, frames_per_clip=4, radius=3, n_train=12, n_test=8)


def _clip(seed=0, T=3, S=16):
    return np.random.default_rng(seed).random((T, 3, S, S))


class TestTinyBackbone:
    @pytest.mark.parametrize("stages", [(4,), (4, 8), (4, 8, 8)])
    def test_extents(self, stages):
        bb = TinyBackbone("b", stages, 3, 5)
        v = {k: ad.Var(x) for k, x in bb.init(np.random.default_rng(0)).items()}
        acts, logits = bb.forward(v, _clip(T=2))
        assert acts.shape == (2, stages[-1], 16 // 2 ** len(stages), 16 // 2 ** len(stages))
        assert logits.shape == (2, 5)


class TestRgbStream:
    def test_zero_clip_zero_heads(self):
        m = TwoStreamModel.initialize(TINY, 0)
        m.params["rgb.classifier.w"][:] = 0.0
        m.params["rgb.classifier.b"][:] = 0.0
        np.testing.assert_array_equal(rgb_stream_forward(np.zeros((1, 3, 16, 16)), m), 0.0)

    def test_logits_length(self):
        m = TwoStreamModel.initialize(TINY, 1)
        assert rgb_stream_forward(_clip(), m).shape == (4,)

    def test_empty_clip(self):
        with pytest.raises(ValueError):
            rgb_stream_forward(np.zeros((0, 3, 16, 16)), TwoStreamModel.initialize(TINY, 0))

    def test_gradcheck_two_class_toy(self):
        cfg = dataclasses.replace(TINY, n_classes=2, flow_layers=0)
        clip = _clip(3, T=2)

        def make(seed):
            return TwoStreamModel.initialize(cfg, seed).params

        def loss(v):
            return cross_entropy(ad.softmax(TwoStreamModel(cfg, {}).rgb_logits(clip, v)), 1)

        res, _ = check_with_resampling(make, loss, max_coords=40)
        assert not failures(res)


class TestFlowStream:
    def test_static_clips_same_logits(self):
        m = TwoStreamModel.initialize(dataclasses.replace(TINY, flow_stem_channels=(4,)), 2)
        rng = np.random.default_rng(0)
        outs = [flow_stream_forward(np.repeat(rng.random((1, 3, 16, 16)), 3, axis=0), m) for _ in range(3)]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_constant_appearance_change(self):
        """A gray offset shared by all frames and channels cancels in the residual.

        With zero padding an offset also changes feature gradients at the
        border, so the reduce kernel is made zero-sum over channels, which
        removes the gray offset before the flow solver sees it.
        """
        m = TwoStreamModel.initialize(TINY, 3)
        R = m.params["flow.layer0.reduce"]
        m.params["flow.layer0.reduce"] = R - R.mean(axis=1, keepdims=True)
        clip = _clip(4)
        a = flow_stream_forward(clip, m)
        b = flow_stream_forward(clip + 0.25, m)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_logits_length(self):
        assert flow_stream_forward(_clip(), TwoStreamModel.initialize(TINY, 0)).shape == (4,)

    def test_too_short(self):
        m = TwoStreamModel.initialize(dataclasses.replace(TINY, flow_layers=2), 0)
        with pytest.raises(ValueError, match="at least 3"):
            flow_stream_forward(_clip(T=2), m)

    def test_rgb_only_model_has_no_flow_stream(self):
        with pytest.raises(ValueError):
            flow_stream_forward(_clip(), TwoStreamModel.initialize(dataclasses.replace(TINY, flow_layers=0), 0))

    def test_rgb_init_independent_of_flow_config(self):
        a = TwoStreamModel.initialize(TINY, 5).params
        b = TwoStreamModel.initialize(dataclasses.replace(TINY, flow_layers=3, n_iters=50), 5).params
        for k in a:
            if k.startswith("rgb."):
                assert a[k].tobytes() == b[k].tobytes()


class TestFuseAndLoss:
    def test_average_head(self):
        z = np.array([0.3, -1.0, 2.0])
        W = np.hstack([np.eye(3), np.eye(3)]) / 2
        np.testing.assert_allclose(fuse(z, z, W), np.exp(z) / np.exp(z).sum(), rtol=1e-14)

    def test_zero_head_uniform(self):
        np.testing.assert_allclose(fuse(np.arange(4.0), -np.arange(4.0), np.zeros((4, 8))), 0.25, rtol=1e-15)

    def test_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = fuse(rng.standard_normal(5) * 20, rng.standard_normal(5) * 20, (rng.standard_normal((5, 10)), rng.standard_normal(5)))
            assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fuse(np.zeros(3), np.zeros(4), np.zeros((3, 7)))

    def test_cross_entropy_examples(self):
        assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(0.6931, abs=1e-4)
        assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
        assert cross_entropy(np.array([0.25, 0.75]), 1) == pytest.approx(0.2877, abs=1e-4)
        assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-np.log(1e-12))

    def test_cross_entropy_bad_index(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.5]), 2)


class TestDataset:
    def test_deterministic(self):
        a, b = synth_dataset(SMALL_DATA), synth_dataset(SMALL_DATA)
        assert a.train.clips.tobytes() == b.train.clips.tobytes()
        assert a.test.labels.tobytes() == b.test.labels.tobytes()

    def test_balanced(self):
        ds = synth_dataset(dataclasses.replace(SMALL_DATA, n_train=30))
        counts = np.bincount(ds.train.labels, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_impossible_geometry(self):
        with pytest.raises(ValueError):
            synth_dataset(dataclasses.replace(SMALL_DATA, radius=8.0))

    def test_appearance_statistics_match_across_classes(self):
        ds = synth_dataset(dataclasses.replace(SMALL_DATA, n_train=200, noise_std=0.0))
        frame_means = ds.train.clips.mean(axis=(1, 2, 3, 4))
        per_class = [frame_means[ds.train.labels == k].mean() for k in range(4)]
        assert np.ptp(per_class) < 0.1 * np.mean(per_class)

    def test_motion_direction(self):
        ds = synth_dataset(dataclasses.replace(SMALL_DATA, noise_std=0.0))
        clip, label = ds.train.clips[0], ds.train.labels[0]
        dx, dy = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}[int(label)]
        np.testing.assert_allclose(np.roll(clip[0], (dy, dx), axis=(1, 2)), clip[1], atol=1e-12)

    def test_shuffle_keeps_labels(self):
        ds = synth_dataset(SMALL_DATA)
        sh = shuffle_frames(ds.train, seed=1)
        np.testing.assert_array_equal(sh.labels, ds.train.labels)
        np.testing.assert_allclose(np.sort(sh.clips, axis=1), np.sort(ds.train.clips, axis=1))


class TestTraining:
    def test_zero_lr_bit_identical(self):
        ds = synth_dataset(SMALL_DATA)
        m = TwoStreamModel.initialize(TINY, 0)
        for stage in ("rgb_stage2", "flow"):
            out, _ = train(m, TrainConfig(stage, epochs=1, batch_size=4, learning_rate=0.0), ds.train)
            for k in m.params:
                assert out.params[k].tobytes() == m.params[k].tobytes()

    def test_overfit_one_sample(self):
        ds = synth_dataset(SMALL_DATA)
        one = Split(ds.train.clips[:1], ds.train.labels[:1])
        _, metrics = train(TwoStreamModel.initialize(TINY, 0), TrainConfig("flow", epochs=10, batch_size=1, learning_rate=1e-3), one)
        losses = [r["loss"] for r in metrics]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_freeze_mask(self):
        ds = synth_dataset(SMALL_DATA)
        m = TwoStreamModel.initialize(TINY, 0)
        cfg = TrainConfig("flow", epochs=1, batch_size=4, freeze=("flow.layer0.",))
        out, _ = train(m, cfg, ds.train)
        changed = {k for k in m.params if out.params[k].tobytes() != m.params[k].tobytes()}
        assert changed and all(k.startswith("flow.") and not k.startswith("flow.layer0.") for k in changed)

    def test_stage1_trains_only_convlstm_and_classifier(self):
        ds = synth_dataset(SMALL_DATA)
        m = TwoStreamModel.initialize(TINY, 0)
        out, _ = train(m, TrainConfig("rgb_stage1", epochs=1, batch_size=4), ds.train)
        changed = {k for k in m.params if out.params[k].tobytes() != m.params[k].tobytes()}
        assert changed and all(k.startswith(("rgb.convlstm.", "rgb.classifier.")) for k in changed)

    def test_positive_clamp(self):
        ds = synth_dataset(SMALL_DATA)
        m = TwoStreamModel.initialize(TINY, 0)
        out, _ = train(m, TrainConfig("flow", epochs=2, batch_size=4, learning_rate=1.0), ds.train)
        for name in ("tau", "theta", "lambda_"):
            assert out.params[f"flow.layer0.{name}"] >= 1e-8

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        ds = synth_dataset(SMALL_DATA)
        m = TwoStreamModel.initialize(TINY, 0)
        m.params["rgb.classifier.b"][0] = np.inf
        with pytest.raises(TrainingDivergedError):
            train(m, TrainConfig("rgb_stage1", epochs=1, batch_size=4), ds.train)

    def test_deterministic(self):
        ds = synth_dataset(SMALL_DATA)
        stages = desk_profile(3, epochs=1)
        a, ma = train_pipeline(TwoStreamModel.initialize(TINY, 3), stages, ds.train)
        b, mb = train_pipeline(TwoStreamModel.initialize(TINY, 3), stages, ds.train)
        assert ma == mb
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_lr_schedule(self):
        cfg = TrainConfig("rgb_stage1", learning_rate=1e-3, lr_milestones=(2, 4), lr_gamma=0.1)
        assert [cfg.lr_at(e) for e in (0, 1, 2, 4)] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-5])
        cfg = TrainConfig("fusion", learning_rate=1.0, lr_gamma=0.1, lr_decay_every=1)
        assert cfg.lr_at(3) == pytest.approx(1e-3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig("warmup")
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")

    def test_full_scale_profile(self):
        assert [FULL_SCALE_PROFILE[s].epochs for s in ("rgb_stage1", "rgb_stage2", "flow", "fusion")] == [200, 150, 750, 250]
        assert FULL_SCALE_PROFILE["rgb_stage1"].clip_length == 25 and FULL_SCALE_PROFILE["flow"].clip_length == 16
        assert FULL_SCALE_PROFILE["flow"].optimizer == "sgd_momentum" and FULL_SCALE_PROFILE["fusion"].learning_rate == 1.0


class _Oracle:
    def __init__(self, split):
        self.lookup = {c.tobytes(): int(y) for c, y in zip(split.clips, split.labels)}

    def predict_probs(self, clip, stream="fused"):
        return np.eye(4)[self.lookup[clip.tobytes()]]


class TestEvaluate:
    @pytest.mark.parametrize("seed", range(3))
    def test_zero_head_chance(self, seed):
        ds = synth_dataset(dataclasses.replace(SMALL_DATA, rng_seed=seed, n_test=16))
        m = TwoStreamModel.initialize(dataclasses.replace(TINY, flow_layers=0), seed)
        m.params["rgb.classifier.w"][:] = 0.0
        assert 0.15 <= evaluate(m, ds.test, "rgb") <= 0.35

    def test_oracle(self):
        ds = synth_dataset(SMALL_DATA)
        assert evaluate(_Oracle(ds.test), ds.test) == 1.0

    def test_repeatable(self):
        ds = synth_dataset(SMALL_DATA)
        m = TwoStreamModel.initialize(TINY, 0)
        assert evaluate(m, ds.test) == evaluate(m, ds.test)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(TwoStreamModel.initialize(TINY, 0), Split(np.empty((0, 4, 3, 16, 16)), np.empty(0, dtype=np.int64)))


@pytest.fixture(scope="module")
def trained():
    cfg = dataclasses.replace(SMALL_DATA, frames_per_clip=6, n_train=48, n_test=32)
    ds = synth_dataset(cfg)
    model, _ = train_pipeline(TwoStreamModel.initialize(TINY, 0), desk_profile(0), ds.train)
    return model, ds


class TestNegativeControl:
    def test_rgb_on_shuffled_frames_near_chance(self, trained):
        model, ds = trained
        acc = evaluate(model, shuffle_frames(ds.test, seed=1), "rgb")
        assert 0.05 <= acc <= 0.5

    def test_flow_stream_loses_accuracy_on_shuffled_frames(self, trained):
        model, ds = trained
        ordered = evaluate(model, ds.test, "flow")
        shuffled = evaluate(model, shuffle_frames(ds.test, seed=1), "flow")
        assert ordered >= 0.9 and shuffled < ordered - 0.3


class TestCheckpoint:
    def test_round_trip_bits(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.w": rng.standard_normal((3, 2, 3, 3)), "b": np.array([-0.0, 5e-324, np.inf, np.nan]),
                  "scalar": np.array(0.25), "empty": np.zeros((0, 3))}
        save(tmp_path / "c.rfk", params)
        back = load(tmp_path / "c.rfk")
        assert set(back) == set(params)
        for k in params:
            assert back[k].shape == params[k].shape and back[k].tobytes() == params[k].tobytes()

    def test_layout(self):
        blob = encode({"ab": np.array([[1.0, 2.0]])})
        assert blob[:4] == b"RFK1"
        assert blob[4:8] == (1).to_bytes(4, "little")
        assert blob[8:12] == (2).to_bytes(4, "little") and blob[12:14] == b"ab"
        assert blob[14:18] == (2).to_bytes(4, "little")
        assert len(blob) == 4 + 4 + 4 + 2 + 4 + 8 + 16

    def test_unicode_names(self):
        back = decode(encode({"flöw.τ": np.array(1.5)}))
        assert float(back["flöw.τ"]) == 1.5

    def test_bad_magic_and_truncation(self):
        blob = encode({"x": np.arange(4.0)})
        with pytest.raises(CheckpointError):
            decode(b"RFK2" + blob[4:])
        with pytest.raises(CheckpointError):
            decode(blob[:-3])
        with pytest.raises(CheckpointError):
            decode(blob + b"\0")

    def test_model_round_trip(self):
        m = TwoStreamModel.initialize(TINY, 0)
        back = decode(encode(m.params))
        assert all(back[k].tobytes() == m.params[k].tobytes() for k in m.params)


class TestAblate:
    def test_sweep_grids(self):
        assert SWEEPS == {"flow_layers": (0, 1, 2, 3), "n_iters": (10, 20, 30, 50)}

    def test_zero_layer_row_is_rgb_only(self):
        ds = synth_dataset(SMALL_DATA)
        stages = desk_profile(0, epochs=1)
        rows = ablate(TINY, "flow_layers", ds, stages, seed=0, values=(0, 1))
        rgb_only, _ = train_pipeline(TwoStreamModel.initialize(dataclasses.replace(TINY, flow_layers=0), 0), stages, ds.train)
        assert [r[0] for r in rows] == [0, 1]
        assert rows[0][1] == evaluate(rgb_only, ds.test, "rgb")

    def test_unknown_dimension(self):
        with pytest.raises(ValueError):
            ablate(TINY, "backbone", synth_dataset(SMALL_DATA), [])

    def test_duplicate_settings(self):
        with pytest.raises(ValueError):
            ablate(TINY, "n_iters", synth_dataset(SMALL_DATA), [], values=(10, 10))
