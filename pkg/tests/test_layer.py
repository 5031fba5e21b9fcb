import math

import numpy as np
import pytest

from coda import tensor
from coda.layer import (AdapterVariant, AdapterWeights, CodaConfig, CodaLayerParams, LayerOutput, StateError,
                        adapter_forward, attention, dense_layer_forward, layer_backward, layer_forward, parameter_census)
from coda.verify import FD_STEP, fd_agrees, fd_noise


def make(n=6, d=4, heads=2, k=2, seed=0, jitter=0.3, **kw):
    cfg = CodaConfig(n=n, d=d, heads=heads, d_ffn=2 * d, d_adpt=3, k=k, lora_rank=2, **kw)
    rng = tensor.Rng(seed)
    params = CodaLayerParams.init(cfg, rng)
    for arr in params.trainable().values():
        arr += rng.normal(arr.shape, jitter)
    return cfg, params, rng.normal((n, d))


def forward(cfg, params, x):
    return layer_forward(x, params.frozen, params.adapters, params.router, cfg)


def reference_attention(q_src, kv_src, f):
    """Loop over heads with plain numpy."""
    h = f.heads
    dh = q_src.shape[-1] // h
    q, k, v = q_src @ f.wq, kv_src @ f.wk, kv_src @ f.wv
    heads = []
    for j in range(h):
        sl = slice(j * dh, (j + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((p / p.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.concatenate(heads, axis=1) @ f.wo


class TestAttention:
    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_per_head_loop(self, heads):
        cfg, params, x = make(d=8, heads=heads)
        kv = tensor.Rng(9).normal((5, 8))
        np.testing.assert_allclose(attention(x[:3], kv, params.frozen), reference_attention(x[:3], kv, params.frozen),
                                   atol=1e-12)

    def test_width_mismatch(self):
        cfg, params, x = make()
        with pytest.raises(tensor.DimensionError):
            attention(np.zeros((3, 5)), x, params.frozen)


class TestForward:
    @pytest.mark.parametrize("attn", ["k_to_k", "k_to_all"])
    def test_routed_rows_are_dense_block_on_subsequence(self, attn):
        cfg, params, x = make(attention_variant=attn)
        out = forward(cfg, params, x)
        idx = out.selection.selected_indices
        m = out.selection.m[idx][:, None]
        g, b = params.frozen.ln_att.gain, params.frozen.ln_att.bias
        xn = tensor.layer_norm(x, g, b)
        if attn == "k_to_k":
            dense = dense_layer_forward(x[idx], params.frozen, params.adapters).y
            block = dense - x[idx] - out.z_adapter[idx]
        else:
            zb = reference_attention(xn[idx], xn, params.frozen)
            h = tensor.layer_norm(xn[idx] + zb, params.frozen.ln_ffn.gain, params.frozen.ln_ffn.bias)
            block = zb + np.maximum(h @ params.frozen.ffn_in, 0) @ params.frozen.ffn_out
        np.testing.assert_allclose(out.y[idx], x[idx] + out.z_adapter[idx] + m * block, atol=1e-12)

    def test_unselected_rows_are_exact(self):
        cfg, params, x = make(n=9, k=3)
        out = forward(cfg, params, x)
        off = out.selection.mask == 0
        np.testing.assert_array_equal(out.y[off], (x + out.z_adapter)[off])

    def test_attention_variants_differ(self):
        a = forward(*make(attention_variant="k_to_k"))
        b = forward(*make(attention_variant="k_to_all"))
        assert not np.allclose(a.y, b.y)

    def test_k_equals_n_matches_dense(self):
        cfg, params, x = make(k=6)
        dense = dense_layer_forward(x, params.frozen, params.adapters)
        np.testing.assert_allclose(forward(cfg, params, x).y, dense.y, atol=1e-12)

    def test_zero_blocks_give_residual_plus_adapter(self):
        cfg, params, x = make()
        params.frozen = params.frozen.zeros_like()
        out = forward(cfg, params, x)
        np.testing.assert_array_equal(out.y, x + out.z_adapter)

    def test_fresh_lora_is_identity_on_frozen_block(self):
        cfg, params, x = make(adapter_variant="lora", jitter=0.0)
        ref = layer_forward(x, params.frozen, AdapterWeights(AdapterVariant.LORA), params.router, cfg)
        np.testing.assert_array_equal(forward(cfg, params, x).y, ref.y)
        np.testing.assert_array_equal(adapter_forward(x, params.adapters), 0)

    def test_batched_equals_per_example(self):
        cfg, params, _ = make()
        xb = tensor.Rng(3).normal((3, 6, 4))
        batched = forward(cfg, params, xb).y
        for i in range(3):
            np.testing.assert_allclose(batched[i], forward(cfg, params, xb[i]).y, atol=1e-12)

    def test_token_count_mismatch(self):
        cfg, params, x = make()
        with pytest.raises(tensor.DimensionError):
            forward(cfg, params, x[:5])

    def test_bad_heads(self):
        with pytest.raises(tensor.DimensionError):
            CodaConfig(n=4, d=6, heads=4)


class TestBackward:
    def test_no_cache(self):
        with pytest.raises(StateError):
            layer_backward(LayerOutput(np.zeros((2, 2)), None, np.zeros((2, 2))), np.zeros((2, 2)))

    def test_cotangent_shape(self):
        cfg, params, x = make()
        with pytest.raises(tensor.DimensionError):
            layer_backward(forward(cfg, params, x), np.zeros((5, 4)))

    def test_zero_cotangent(self):
        cfg, params, x = make()
        grads = layer_backward(forward(cfg, params, x), np.zeros((6, 4)))
        assert all(np.all(g == 0) for g in grads.values())

    def test_gradients_cover_trainables_only(self):
        cfg, params, x = make()
        grads = layer_backward(forward(cfg, params, x), np.ones((6, 4)))
        assert set(grads) == set(params.trainable())
        assert not set(grads) & set(params.frozen_arrays())

    @pytest.mark.parametrize("router", ["soft_topk", "sigmoid_gate"])
    @pytest.mark.parametrize("adapter", ["parallel", "lora"])
    def test_finite_differences(self, router, adapter):
        cfg, params, x = make(router_variant=router, adapter_variant=adapter, eps_target=1.0, beta=0.85)
        dy = tensor.Rng(5).normal((6, 4))
        out = forward(cfg, params, x)
        grads = layer_backward(out, dy)
        noise = fd_noise(float(np.sum(np.abs(dy * out.y))), 10.0)
        for name, arr in params.trainable().items():
            numeric = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                orig = arr[i]
                arr[i] = orig + FD_STEP
                up = np.sum(dy * forward(cfg, params, x).y)
                arr[i] = orig - FD_STEP
                down = np.sum(dy * forward(cfg, params, x).y)
                arr[i] = orig
                numeric[i] = (up - down) / (2 * FD_STEP)
            assert np.all(fd_agrees(grads[name], numeric, noise)), name


class TestCensus:
    def test_counts(self):
        cfg = CodaConfig(n=8, d=8, heads=2, d_ffn=16, d_adpt=3)
        c = parameter_census(CodaLayerParams.init(cfg, tensor.Rng(0)))
        assert c["frozen"] == 4 * 64 + 2 * 8 * 16
        assert c["router"] == 8
        assert c["layer_norm"] == 4 * 8
        assert c["adapter"] == 2 * 8 * 3
        assert c["trainable"] == c["adapter"] + c["router"] + c["layer_norm"]
        assert c["total"] == c["trainable"] + c["frozen"]

    def test_lora_counts(self):
        cfg = CodaConfig(n=8, d=8, heads=2, d_ffn=16, adapter_variant="lora", lora_rank=2)
        c = parameter_census(CodaLayerParams.init(cfg, tensor.Rng(0)))
        assert c["adapter"] == 4 * 2 * (8 + 8) + 2 * (8 + 16) + 2 * (16 + 8)
