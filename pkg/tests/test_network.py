import numpy as np
import pytest

from oracles import naive_conv_transpose2d, scalar_cuba, scalar_plif
from spikepose import conv
from spikepose import network as nw
from spikepose.network import (ANN, CUBA, HEATMAPS_ONLY, PLIF, SPIKING_CONV, LayerSpec, NetworkSpec,
                               RepresentationError, decoder_forward, encoder_forward, forward,
                               table1_spec)
from spikepose.weights import fold_batchnorm, init_weights, quantize_weights, zero_weights


def toy_encoder(layers, size=6, neuron=CUBA, params=None):
    params = params or {"alpha_u": 0.5, "alpha_v": 0.5, "theta": 1.0}
    enc = [LayerSpec(SPIKING_CONV, k, c, stride=s, neuron=neuron, params=dict(params))
           for k, c, s in layers]
    return NetworkSpec(enc, [], size, size, 2)


@pytest.fixture(scope="module")
def small_spec():
    return table1_spec(input_size=32)


class TestShapes:
    def test_table_sizes(self):
        enc, dec = table1_spec().layer_output_sizes()
        assert enc == [80, 40, 20, 20, 20, 10, 10, 10]
        assert dec == [10, 20, 40, 40, 40, 40, 40]
        assert table1_spec().latent_shape == (128, 10, 10)

    def test_head_channels(self):
        units, _ = table1_spec().decoder_units()
        outs = {u.head: u.c_out for u in units if u.name.endswith(".out")}
        assert outs == {"heatmap": 13, "center": 1, "regression": 26, "offset": 26}
        assert all(u.c_out == 96 for u in units if u.name.endswith(".pw"))

    def test_forward_shapes(self, small_spec):
        store = init_weights(small_spec, 0)
        x = (np.random.default_rng(0).random((2, 4, 2, 32, 32)) < 0.05).astype(np.int32)
        maps, log = forward(x, small_spec, store)
        assert maps.heatmap.shape == (2, 13, 8, 8)
        assert maps.regression.shape == (2, 26, 8, 8) and maps.center.shape == (2, 1, 8, 8)
        assert 0 <= maps.heatmap.min() and maps.heatmap.max() <= 1
        assert log.n_samples == 2 and log.input_spikes[0] == x.astype(bool).sum()

    def test_input_mismatch(self, small_spec):
        with pytest.raises(ValueError):
            encoder_forward(np.zeros((4, 2, 16, 16)), small_spec, init_weights(small_spec, 0))
        with pytest.raises(ValueError):
            decoder_forward(np.zeros((128, 3, 3)), small_spec, init_weights(small_spec, 0))

    def test_ann_variant_same_shapes(self, small_spec):
        ann = small_spec.with_neuron(ANN)
        x = (np.random.default_rng(1).random((4, 2, 32, 32)) < 0.05).astype(np.int32)
        latent, log = encoder_forward(x, ann, init_weights(ann, 0))
        assert latent.shape == small_spec.latent_shape and log.encoder_mode == "ann"

    def test_heatmaps_only(self, small_spec):
        spec = small_spec.with_heads(HEATMAPS_ONLY)
        maps, _ = forward(np.zeros((4, 2, 32, 32)), spec, init_weights(spec, 0))
        assert maps.center is None and maps.regression is None and maps.offset is None
        assert not any(".center." in u.name for u in spec.units())


class TestEncoder:
    def test_zero_input_zero_bias(self, small_spec):
        latent, log = encoder_forward(np.zeros((8, 2, 32, 32)), small_spec, zero_weights(small_spec))
        assert not latent.any() and not log.input_spikes.any() and not log.exact_acs.any()

    def test_single_spike_membrane_trace_cuba(self):
        spec = toy_encoder([(3, 1, 1)])
        store = zero_weights(spec)
        store["enc0"].weight[0, 1, 1, 1] = 0.4
        x = np.zeros((6, 2, 6, 6))
        x[0, 1, 2, 3] = 1
        latent, _ = encoder_forward(x, spec, store)
        _, vs, _ = scalar_cuba(0.4 * x[:, 1, 2, 3], 0.5, 0.5, 1.0)
        # latent is the last pre-reset potential, equal to stored v when no spike fired
        assert latent[0, 2, 3] == pytest.approx(vs[-1], abs=1e-12)
        assert latent[0].sum() == pytest.approx(vs[-1], abs=1e-12)

    def test_single_spike_membrane_trace_plif(self):
        spec = toy_encoder([(1, 1, 1)], neuron=PLIF, params={"tau": 3.0, "theta": 5.0, "v_reset": 0.0})
        store = zero_weights(spec)
        store["enc0"].weight[0, 0, 0, 0] = 2.0
        x = np.zeros((4, 2, 6, 6))
        x[1, 0, 0, 0] = 1
        latent, _ = encoder_forward(x, spec, store)
        vs, _ = scalar_plif(2.0 * x[:, 0, 0, 0], 3.0, 5.0, 0.0)
        assert latent[0, 0, 0] == pytest.approx(vs[-1], abs=1e-12)

    def test_graded_vs_binary_saturating_first_layer(self):
        spec = toy_encoder([(3, 4, 1), (3, 2, 1)], params={"alpha_u": 1.0, "alpha_v": 1.0, "theta": 1e-9})
        store = init_weights(spec, 3)
        store["enc0"].weight[...] = 0
        store["enc0"].bias[...] = 1.0  # every first-layer neuron fires every step
        rng = np.random.default_rng(0)
        graded = rng.integers(0, 4, (4, 2, 6, 6))
        a, _ = encoder_forward(graded, spec, store)
        b, _ = encoder_forward(np.minimum(graded, 1), spec, store)
        np.testing.assert_array_equal(a, b)

    def test_non_binary_spikes_rejected(self, monkeypatch):
        spec = toy_encoder([(3, 2, 1), (3, 2, 1)])
        store = init_weights(spec, 0)
        x = np.zeros((2, 2, 6, 6))
        x[0, 0, 1, 1] = 3  # graded counts are allowed into the first layer
        encoder_forward(x, spec, store)
        orig = nw._neuron_scan

        def graded_scan(cur, layer, dtype, keep_spikes=True):
            out, v = orig(cur, layer, dtype, keep_spikes)
            if out is not None:
                out = out.astype(dtype)
                out.flat[0] = 2.0
            return out, v

        monkeypatch.setattr(nw, "_neuron_scan", graded_scan)
        with pytest.raises(RepresentationError):
            encoder_forward(x, spec, store)

    def test_sparse_and_dense_agree(self, small_spec):
        store = init_weights(small_spec, 2)
        x = (np.random.default_rng(5).random((8, 2, 32, 32)) < 0.03).astype(np.int32)
        a, la = encoder_forward(x, small_spec, store, conv_impl="sparse")
        b, lb = encoder_forward(x, small_spec, store, conv_impl="dense")
        np.testing.assert_allclose(a, b, atol=1e-10)
        np.testing.assert_array_equal(la.exact_acs, lb.exact_acs)

    def test_deterministic(self, small_spec):
        store = init_weights(small_spec, 2)
        x = (np.random.default_rng(5).random((8, 2, 32, 32)) < 0.03).astype(np.int32)
        a = forward(x, small_spec, store)[0].heatmap
        b = forward(x, small_spec, store)[0].heatmap
        assert np.array_equal(a, b)


class TestDecoder:
    def test_constant_half(self, small_spec):
        maps = decoder_forward(np.zeros(small_spec.latent_shape), small_spec, zero_weights(small_spec))
        assert np.all(maps.heatmap == 0.5) and np.all(maps.center == 0.5)
        assert not maps.regression.any()

    def test_one_hot_transpose_stencil(self, small_spec):
        store = zero_weights(small_spec)
        rng = np.random.default_rng(0)
        w = rng.standard_normal(store["dec2"].weight.shape)
        store["dec2"].weight[...] = w
        units = {u.name: u for u in small_spec.decoder_units()[0]}
        u = units["dec2"]
        x = np.zeros((1, u.c_in, u.h_in, u.w_in))
        x[0, 5, 1, 2] = 1.0
        ref = naive_conv_transpose2d(x, w, None, 2, 2, 1)
        got = conv.conv_transpose2d(x, w, None, u.stride, u.padding, 1)
        np.testing.assert_allclose(got, ref, atol=1e-12)
        assert got.shape[-1] == u.w_out == 2 * u.w_in

    def test_fold_batchnorm_preserves_output(self, small_spec):
        store = init_weights(small_spec, 4)
        rng = np.random.default_rng(1)
        for p in store:
            if p.has_batchnorm:
                n = p.gamma.shape[0]
                p.gamma[...] = rng.uniform(0.5, 1.5, n)
                p.beta[...] = rng.normal(0, 0.1, n)
                p.mean[...] = rng.normal(0, 0.1, n)
                p.var[...] = rng.uniform(0.5, 2.0, n)
        latent = rng.standard_normal(small_spec.latent_shape)
        a = decoder_forward(latent, small_spec, store)
        b = decoder_forward(latent, small_spec, fold_batchnorm(store))
        for k, v in a.as_dict().items():
            np.testing.assert_allclose(b.as_dict()[k], v, rtol=1e-6, atol=1e-9)

    def test_quantize_32_within_tolerance(self, small_spec):
        store = init_weights(small_spec, 6)
        x = (np.random.default_rng(3).random((4, 2, 32, 32)) < 0.1).astype(np.int32)
        a = forward(x, small_spec, store)[0]
        b = forward(x, small_spec, quantize_weights(store, 32))[0]
        for k, v in a.as_dict().items():
            assert np.max(np.abs(b.as_dict()[k] - v)) <= 1e-5


class TestSpecText:
    def test_round_trip(self, tmp_path):
        spec = table1_spec(neuron=CUBA, heads=HEATMAPS_ONLY)
        spec.save(tmp_path / "net.ini")
        back = NetworkSpec.load(tmp_path / "net.ini")
        assert back == spec
        assert [u.weight_shape for u in back.units()] == [u.weight_shape for u in spec.units()]

    def test_missing_network_section(self):
        with pytest.raises(ValueError):
            NetworkSpec.from_text("[encoder.0]\nkind = spiking_conv\n")

    def test_bad_layer(self):
        with pytest.raises(ValueError):
            LayerSpec(SPIKING_CONV, 4, 8, neuron=CUBA)
        with pytest.raises(ValueError):
            LayerSpec(SPIKING_CONV, 3, 8, neuron=None)
        with pytest.raises(ValueError):
            NetworkSpec([], [], 8, 8)
