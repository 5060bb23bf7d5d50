import os

import numpy as np
import numpy.testing as npt
import pytest

from voxelstream.errors import FormatError, InvalidSpecError, ShapeError
from voxelstream.networks import (Decoder, Encoder, NetworkSpec, VARIANTS, build_model,
                                  extract_features, forward_variant, load_checkpoint,
                                  save_checkpoint)
from voxelstream.tensor import Tape, Tensor

# small enough to build and run in milliseconds
MICRO = dict(num_classes=3, clip=(3, 4, 8, 8), width_factor=1 / 32,
             pooling=((1, 2, 2), (2, 2, 2), None, None, None))


def _clips(n, spec, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n,) + tuple(spec.clip), dtype=np.float32))


class TestNetworkSpec:
    def test_desk_scale_widths(self):
        spec = NetworkSpec.desk_scale(num_classes=4)
        assert spec.scaled_channels == (8, 16, 32, 32, 32)
        assert spec.scaled_fc == 256

    def test_full_scale_widths(self):
        spec = NetworkSpec.full_scale(num_classes=101)
        assert spec.scaled_channels == (64, 128, 256, 256, 256)
        assert spec.scaled_fc == 2048

    @pytest.mark.parametrize("kw", [
        dict(num_classes=1),
        dict(num_classes=4, conv_channels=(64, 128, 256, 256)),
        dict(num_classes=4, pooling=((2, 2, 2),) * 4),
        dict(num_classes=4, clip=(1, 8, 32, 32)),
        dict(num_classes=4, clip=(3, 1, 32, 32)),
        dict(num_classes=4, width_factor=0.0),
        dict(num_classes=4, motion_tap="fc9"),
    ])
    def test_invalid_specs_rejected(self, kw):
        with pytest.raises(InvalidSpecError):
            NetworkSpec(**kw)

    def test_pooling_collapse_rejected(self):
        # T=2 survives one (2,2,2) pool but not a second
        with pytest.raises(InvalidSpecError):
            Encoder(NetworkSpec(num_classes=2, clip=(3, 2, 16, 16), width_factor=1 / 32,
                                pooling=((2, 2, 2), (2, 2, 2), None, None, None)),
                    np.random.default_rng(0))


class TestEncoder:
    def test_fc7_shape_desk_scale(self):
        spec = NetworkSpec.desk_scale(num_classes=4)
        enc = Encoder(spec, np.random.default_rng(0))
        conv_map, fc7 = enc.forward(_clips(2, spec))
        assert fc7.shape == (2, 256)
        assert conv_map.shape == (2, 32, 1, 2, 2)

    def test_zero_clip_gives_finite_bias_pattern(self):
        spec = NetworkSpec(**MICRO)
        enc = Encoder(spec, np.random.default_rng(1))
        x = Tensor(np.zeros((1,) + tuple(spec.clip), dtype=np.float32))
        _, fc7 = enc.forward(x)
        assert np.isfinite(fc7.data).all()
        # biases start at zero, so a zero clip propagates to a zero fc7
        npt.assert_array_equal(fc7.data, 0.0)

    def test_parameter_names(self):
        enc = Encoder(NetworkSpec(**MICRO), np.random.default_rng(0))
        names = set(enc.parameters())
        assert {"conv1.w", "conv5.b", "fc6.w", "fc7.b"} <= names
        assert len(names) == 14


class TestDecoder:
    def test_output_shape_desk_scale(self):
        spec = NetworkSpec.desk_scale(num_classes=4)
        enc = Encoder(spec, np.random.default_rng(0))
        dec = Decoder(spec, enc.conv_out_shape, np.random.default_rng(1))
        assert dec.out_shape == (2, 7, 32, 32)

    def test_zero_map_emits_bias_pattern(self):
        spec = NetworkSpec(**MICRO)
        enc = Encoder(spec, np.random.default_rng(0))
        dec = Decoder(spec, enc.conv_out_shape, np.random.default_rng(1))
        dec.stages[-1]["b"].data[:] = (0.5, -0.25)
        out = dec.forward(Tensor(np.zeros((1,) + enc.conv_out_shape, dtype=np.float32)))
        assert np.isfinite(out.data).all()
        npt.assert_allclose(out.data[0, 0], 0.5)
        npt.assert_allclose(out.data[0, 1], -0.25)

    def test_mirror_mismatch_names_stage(self):
        # 30 pools to 15 then floors to 7; the mirror restores 28, not 30
        spec = NetworkSpec(num_classes=2, clip=(3, 8, 30, 30), width_factor=1 / 32)
        enc = Encoder(spec, np.random.default_rng(0))
        with pytest.raises(InvalidSpecError, match="flow"):
            Decoder(spec, enc.conv_out_shape, np.random.default_rng(1))

    def test_shape_property_sweep(self):
        # 50 random valid specs: decoder output is always (2, T-1, H, W)
        rng = np.random.default_rng(7)
        pool_choices = (None, (1, 2, 2), (2, 2, 2))
        built = 0
        while built < 50:
            pooling = tuple(pool_choices[rng.integers(0, 3)] for _ in range(5))
            div = [1, 1, 1]
            for p in pooling:
                if p is not None:
                    div = [d * e for d, e in zip(div, p)]
            t = div[0] * int(rng.integers(1, 3))
            if t < 2:
                t *= 2
            h = div[1] * int(rng.integers(1, 3))
            w = div[2] * int(rng.integers(1, 3))
            if h < 3 or w < 3:      # final 3x3 spatial kernel needs room
                continue
            spec = NetworkSpec(num_classes=2, clip=(3, t, h, w), width_factor=1 / 32,
                               pooling=pooling)
            enc = Encoder(spec, rng)
            dec = Decoder(spec, enc.conv_out_shape, rng)
            assert dec.out_shape == (2, t - 1, h, w), spec
            built += 1


class TestVariants:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shape_contract(self, variant):
        spec = NetworkSpec(**MICRO)
        model = build_model(variant, spec, seed=3)
        out = forward_variant(model, _clips(2, spec))
        t = spec.clip[1]
        assert out.logits.shape == (2, spec.num_classes)
        assert out.flow.shape == (2, 2, t - 1, spec.clip[2], spec.clip[3])
        assert out.features.shape == (2, model.feature_dim)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_flow_skipped_on_request(self, variant):
        spec = NetworkSpec(**MICRO)
        model = build_model(variant, spec, seed=3)
        out = model.forward(_clips(1, spec), with_flow=False)
        assert out.flow is None
        assert out.logits.shape == (1, spec.num_classes)

    def test_unknown_variant_rejected(self):
        with pytest.raises(InvalidSpecError):
            build_model("threestream", NetworkSpec(**MICRO))

    def test_clip_mismatch_rejected(self):
        spec = NetworkSpec(**MICRO)
        model = build_model("combined", spec, seed=0)
        bad = Tensor(np.zeros((1, 3, 5, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            model.forward(bad)

    def test_twostream_fused_head_width(self):
        spec = NetworkSpec.desk_scale(num_classes=4)
        model = build_model("twostream", spec, seed=0)
        assert model.head.w.shape == (4, 512)
        assert model.feature_dim == 512

    def test_combined_sharing_witness(self):
        # one encoder serves both heads: touching conv1 moves logits AND flow
        spec = NetworkSpec(**MICRO)
        model = build_model("combined", spec, seed=5)
        clips = _clips(1, spec, seed=5)
        before = model.forward(clips)
        model.encoder.stages[0]["w"].data += 0.05
        after = model.forward(clips)
        assert not np.allclose(before.logits.data, after.logits.data)
        assert not np.allclose(before.flow.data, after.flow.data)

    def test_initial_motion_zeroed_ablation(self):
        # with the motion branch silenced, logits reduce to the appearance
        # half of the head plus its bias
        spec = NetworkSpec(**MICRO)
        model = build_model("initial", spec, seed=6)
        for name, p in model.parameters().items():
            if name.startswith(("motion.", "decoder.")):
                p.data[:] = 0.0
        clips = _clips(2, spec, seed=6)
        _, app7 = model.appearance.forward(clips)
        fc = spec.scaled_fc
        expected = app7.data @ model.head.w.data[:, :fc].T + model.head.b.data
        out = model.forward(clips)
        npt.assert_allclose(out.logits.data, expected, rtol=1e-5, atol=1e-6)

    def test_initial_conv5_tap(self):
        spec = NetworkSpec(num_classes=3, clip=(3, 4, 8, 8), width_factor=1 / 32,
                           pooling=((1, 2, 2), (2, 2, 2), None, None, None),
                           motion_tap="conv5")
        model = build_model("initial", spec, seed=0)
        assert model.feature_dim == spec.scaled_fc + model.motion.flat_dim
        out = model.forward(_clips(1, spec))
        assert out.features.shape == (1, model.feature_dim)

    def test_same_seed_same_weights(self):
        spec = NetworkSpec(**MICRO)
        a = build_model("twostream", spec, seed=9)
        b = build_model("twostream", spec, seed=9)
        for k, p in a.parameters().items():
            npt.assert_array_equal(p.data, b.parameters()[k].data)


class TestExtractFeatures:
    @pytest.mark.parametrize("variant,dim", [("initial", 512), ("combined", 256),
                                             ("twostream", 512)])
    def test_desk_scale_dims(self, variant, dim):
        spec = NetworkSpec.desk_scale(num_classes=4)
        model = build_model(variant, spec, seed=0)
        feats = extract_features(model, _clips(2, spec))
        assert feats.shape == (2, dim)

    def test_deterministic_and_detached(self):
        spec = NetworkSpec(**MICRO)
        model = build_model("twostream", spec, seed=1)
        clips = _clips(2, spec, seed=4)
        a = extract_features(model, clips)
        b = extract_features(model, clips)
        npt.assert_array_equal(a.data, b.data)
        with Tape() as tape:
            feats = extract_features(model, clips)
            assert feats.requires_grad is False
            assert len(tape) == 0


class TestCheckpoints:
    def test_round_trip_restores_weights(self, tmp_path):
        spec = NetworkSpec(**MICRO)
        src = build_model("twostream", spec, seed=11)
        save_checkpoint(src, str(tmp_path / "ckpt"))
        dst = build_model("twostream", spec, seed=999)
        load_checkpoint(dst, str(tmp_path / "ckpt"))
        for k, p in src.parameters().items():
            npt.assert_array_equal(p.data, dst.parameters()[k].data)
        clips = _clips(1, spec, seed=2)
        npt.assert_array_equal(src.forward(clips).logits.data,
                               dst.forward(clips).logits.data)

    def test_missing_manifest(self, tmp_path):
        model = build_model("combined", NetworkSpec(**MICRO), seed=0)
        with pytest.raises(FormatError):
            load_checkpoint(model, str(tmp_path / "nowhere"))

    def test_manifest_key_mismatch(self, tmp_path):
        spec = NetworkSpec(**MICRO)
        save_checkpoint(build_model("combined", spec, seed=0), str(tmp_path / "c"))
        other = build_model("twostream", spec, seed=0)
        with pytest.raises(FormatError, match="missing"):
            load_checkpoint(other, str(tmp_path / "c"))

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(build_model("combined", NetworkSpec(**MICRO), seed=0),
                        str(tmp_path / "c"))
        wider = NetworkSpec(num_classes=3, clip=(3, 4, 8, 8), width_factor=1 / 16,
                            pooling=((1, 2, 2), (2, 2, 2), None, None, None))
        model = build_model("combined", wider, seed=0)
        with pytest.raises(ShapeError):
            load_checkpoint(model, str(tmp_path / "c"))

    def test_bad_manifest_line(self, tmp_path):
        spec = NetworkSpec(**MICRO)
        model = build_model("combined", spec, seed=0)
        ckpt = tmp_path / "c"
        save_checkpoint(model, str(ckpt))
        manifest = ckpt / "manifest.txt"
        manifest.write_text("not a manifest line\n")
        with pytest.raises(FormatError, match="manifest"):
            load_checkpoint(model, str(ckpt))
