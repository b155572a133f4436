"""Module forwards against loop oracles, the prefix gate algebra, the
gradient-compensation behaviour, and module-set bookkeeping."""

import numpy as np
import pytest

from petcl import tensor as T
from petcl.model import AttachmentPoint, BackboneConfig
from petcl.pet import (
    AdapterParams,
    LoRAParams,
    LowRankDelta,
    PETSet,
    PrefixParams,
    adapter_forward,
    build_pet_set,
    calibrated_prefix_attention,
    lora_forward,
    lora_merge,
    pet_flatten,
    pet_unflatten,
    prefix_as_adapter_form,
    prefix_attention,
    prefix_lambda,
)
from petcl.tensor import Tensor

from oracles import multi_head_attention_loops, softmax_rows


def _gen(seed=0):
    return np.random.default_rng(seed)


def _prefix(gen, l, d, compensate=True, scales=True, lam_grad=False,
            scale_val=1.0, requires_grad=False):
    return PrefixParams(
        Tensor(gen.normal(0.0, 0.4, size=(l, d)), requires_grad=requires_grad),
        Tensor(gen.normal(0.0, 0.4, size=(l, d)), requires_grad=requires_grad),
        Tensor(np.asarray(scale_val), requires_grad=requires_grad and scales),
        Tensor(np.asarray(scale_val), requires_grad=requires_grad and scales),
        compensate, scales, lam_grad)


def _proj(gen, d):
    return (Tensor(gen.normal(0.0, 0.4, size=(d, d))) for _ in range(3))


# ---------------------------------------------------------------------------
# adapters


def test_sequential_adapter_matches_formula():
    gen = _gen(0)
    d, r = 8, 3
    h = gen.normal(size=(5, d))
    p = AdapterParams(Tensor(gen.normal(size=(d, r))), Tensor(gen.normal(size=(r, d))),
                      None, "sequential", "relu")
    got = adapter_forward(p, Tensor(h), Tensor(h)).data
    want = h + np.maximum(h @ p.w_down.data, 0.0) @ p.w_up.data
    assert np.abs(got - want).max() < 1e-12


def test_parallel_adapter_matches_scaled_formula():
    gen = _gen(1)
    d, r = 8, 3
    e = gen.normal(size=(5, d))
    h = gen.normal(size=(5, d))
    p = AdapterParams(Tensor(gen.normal(size=(d, r))), Tensor(gen.normal(size=(r, d))),
                      Tensor(np.asarray(0.35)), "parallel", "relu")
    got = adapter_forward(p, Tensor(e), Tensor(h)).data
    want = h + 0.35 * (np.maximum(e @ p.w_down.data, 0.0) @ p.w_up.data)
    assert np.abs(got - want).max() < 1e-12


def test_adapter_zero_up_projection_is_identity():
    gen = _gen(2)
    d, r = 8, 3
    h = gen.normal(size=(5, d))
    p = AdapterParams(Tensor(gen.normal(size=(d, r))), Tensor(np.zeros((r, d))),
                      Tensor(np.asarray(0.5)), "parallel", "gelu")
    assert np.abs(adapter_forward(p, Tensor(h), Tensor(h)).data - h).max() < 1e-12


# ---------------------------------------------------------------------------
# low-rank deltas


def test_lora_forward_matches_formula():
    gen = _gen(3)
    d, r = 8, 2
    e = gen.normal(size=(5, d))
    h = gen.normal(size=(5, d))
    delta = LowRankDelta(Tensor(gen.normal(size=(d, r))),
                         Tensor(gen.normal(size=(r, d))), Tensor(np.asarray(0.7)))
    got = lora_forward(delta, Tensor(e), Tensor(h)).data
    want = h + 0.7 * (e @ delta.w_down.data @ delta.w_up.data)
    assert np.abs(got - want).max() < 1e-12


def test_lora_merge_equals_forward_path():
    gen = _gen(4)
    d, r = 10, 3
    w = gen.normal(size=(d, d))
    e = gen.normal(size=(7, d))
    delta = LowRankDelta(Tensor(gen.normal(size=(d, r))),
                         Tensor(gen.normal(size=(r, d))), Tensor(np.asarray(0.3)))
    merged = lora_merge(delta, Tensor(w))
    via_forward = lora_forward(delta, Tensor(e), Tensor(e @ w)).data
    assert np.abs(e @ merged - via_forward).max() < 1e-10


def test_lora_merge_delta_has_rank_at_most_r():
    gen = _gen(5)
    d, r = 12, 3
    w = gen.normal(size=(d, d))
    delta = LowRankDelta(Tensor(gen.normal(size=(d, r))),
                         Tensor(gen.normal(size=(r, d))), Tensor(np.asarray(1.3)))
    diff = lora_merge(delta, Tensor(w)) - w
    sv = np.linalg.svd(diff, compute_uv=False)
    assert (sv > sv[0] * 1e-9).sum() <= r


def test_lora_merge_shape_mismatch():
    delta = LowRankDelta(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))),
                         Tensor(np.asarray(1.0)))
    with pytest.raises(ValueError, match="does not match"):
        lora_merge(delta, Tensor(np.zeros((5, 5))))


# ---------------------------------------------------------------------------
# prefix attention: values


def prefix_concat_oracle(p_k, p_v, e, wq, wk, wv, heads):
    q = e @ wq
    k_full = np.vstack([p_k, e @ wk])
    v_full = np.vstack([p_v, e @ wv])
    return multi_head_attention_loops(q, k_full, v_full, heads)


def prefix_lambda_oracle(p_k, e, wq, wk, heads):
    """Summed prefix-column attention probability per head and query."""
    t, d = e.shape
    l = p_k.shape[0]
    hd = d // heads
    q = e @ wq
    k_full = np.vstack([p_k, e @ wk])
    lam = np.zeros((heads, t))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = q[:, sl] @ k_full[:, sl].T / np.sqrt(hd)
        probs = softmax_rows(logits)
        lam[h] = probs[:, :l].sum(axis=1)
    return lam


@pytest.mark.parametrize("heads", [1, 2])
def test_prefix_attention_matches_concat_oracle(heads):
    gen = _gen(6)
    d, l, t = 8, 3, 5
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    p = _prefix(gen, l, d, compensate=False, scales=False)
    got = prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
    want = prefix_concat_oracle(p.p_k.data, p.p_v.data, e, wq.data, wk.data,
                                wv.data, heads)
    assert np.abs(got - want).max() < 1e-10


@pytest.mark.parametrize("heads", [1, 2])
def test_prefix_gate_equals_summed_prefix_mass(heads):
    gen = _gen(7)
    d, l, t = 8, 3, 5
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    p = _prefix(gen, l, d)
    got = prefix_lambda(p, Tensor(e), wq, wk, heads).data
    want = prefix_lambda_oracle(p.p_k.data, e, wq.data, wk.data, heads)
    assert np.abs(got - want).max() < 1e-12


def test_mixture_form_matches_concat_form():
    gen = _gen(8)
    for i in range(30):
        d = int(gen.integers(2, 9)) * 2
        heads = int(gen.choice([1, 2]))
        l = int(gen.integers(1, 5))
        t = int(gen.integers(1, 9))
        e = gen.normal(size=(t, d))
        wq, wk, wv = _proj(gen, d)
        p = _prefix(gen, l, d, compensate=False, scales=False)
        concat_route = prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
        mixture_route = prefix_as_adapter_form(p, Tensor(e), wq, wk, wv, heads).data
        assert np.abs(concat_route - mixture_route).max() < 1e-8, i


def test_reparam_without_compensation_or_scales_equals_concat():
    gen = _gen(9)
    d, l, t, heads = 8, 3, 5, 2
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    p = _prefix(gen, l, d, compensate=False, scales=False)
    concat_route = prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
    reparam_route = calibrated_prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
    assert np.abs(concat_route - reparam_route).max() < 1e-10


def test_calibrated_value_matches_manual_mixture():
    gen = _gen(10)
    d, l, t = 6, 2, 4
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    sk, sv = 1.7, 0.6
    p = _prefix(gen, l, d, compensate=True, scales=True, scale_val=1.0)
    p.s_k = Tensor(np.asarray(sk))
    p.s_v = Tensor(np.asarray(sv))
    got = calibrated_prefix_attention(p, Tensor(e), wq, wk, wv, 1).data

    q = e @ wq.data
    k = e @ wk.data
    v = e @ wv.data
    plog = q @ p.p_k.data.T / np.sqrt(d)
    clog = q @ k.T / np.sqrt(d)
    full = softmax_rows(np.hstack([plog, clog]))
    lam = full[:, :l].sum(axis=1, keepdims=True)
    want = (1 - lam) * (softmax_rows(clog) @ v) + softmax_rows(sk * plog) @ (sv * p.p_v.data)
    assert np.abs(got - want).max() < 1e-10


def test_empty_prefix_equals_vanilla_attention():
    gen = _gen(11)
    d, t, heads = 8, 5, 2
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    p = PrefixParams(Tensor(np.zeros((0, d))), Tensor(np.zeros((0, d))),
                     Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
                     compensate=False, learnable_scales=False)
    got = prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
    q, k, v = e @ wq.data, e @ wk.data, e @ wv.data
    want = multi_head_attention_loops(q, k, v, heads)
    assert np.abs(got - want).max() < 1e-12


def test_strongly_repelled_prefix_approaches_vanilla():
    gen = _gen(12)
    d, t = 6, 4
    e = np.ones((t, d)) + 0.01 * gen.normal(size=(t, d))
    wq = Tensor(np.eye(d))
    wk, wv = Tensor(gen.normal(size=(d, d))), Tensor(gen.normal(size=(d, d)))
    # keys anti-aligned with every (nearly identical) query
    q_mean = e.mean(axis=0)
    p = PrefixParams(Tensor(-200.0 * np.tile(q_mean, (2, 1)) / (q_mean @ q_mean)),
                     Tensor(gen.normal(size=(2, d))),
                     Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
                     compensate=False, learnable_scales=False)
    lam = prefix_lambda(p, Tensor(e), wq, wk, 1).data
    assert lam.max() < 1e-10
    got = prefix_attention(p, Tensor(e), wq, wk, wv, 1).data
    want = multi_head_attention_loops(e, e @ wk.data, e @ wv.data, 1)
    assert np.abs(got - want).max() < 1e-8


def test_batched_prefix_matches_per_sample():
    gen = _gen(13)
    d, l, t, heads, b = 8, 2, 5, 2, 3
    e = gen.normal(size=(b, t, d))
    wq, wk, wv = _proj(gen, d)
    p = _prefix(gen, l, d, compensate=True, scales=True)
    got = calibrated_prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
    for i in range(b):
        single = calibrated_prefix_attention(p, Tensor(e[i]), wq, wk, wv, heads).data
        assert np.abs(got[i] - single).max() < 1e-12


# ---------------------------------------------------------------------------
# prefix attention: gradients


def _pv_grad(p, e, wq, wk, wv, heads, readout, reparam):
    p.p_v.requires_grad = True
    p.p_v.zero_grad()
    fn = calibrated_prefix_attention if reparam else prefix_attention
    out = fn(p, Tensor(e), wq, wk, wv, heads)
    T.reduce_sum(T.mul(out, Tensor(readout))).backward()
    return p.p_v.grad.copy()


def test_uncalibrated_value_gradient_is_gate_weighted():
    gen = _gen(14)
    d, l, t = 6, 3, 5
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    readout = gen.normal(size=(t, d))
    p = _prefix(gen, l, d, compensate=False, scales=False)
    got = _pv_grad(p, e, wq, wk, wv, 1, readout, reparam=False)

    q = e @ wq.data
    plog = q @ p.p_k.data.T / np.sqrt(d)
    clog = q @ (e @ wk.data).T / np.sqrt(d)
    full = softmax_rows(np.hstack([plog, clog]))
    lam = full[:, :l].sum(axis=1)
    sigma = softmax_rows(plog)
    want = np.zeros((l, d))
    for i in range(l):
        for tt in range(t):
            want[i] += lam[tt] * sigma[tt, i] * readout[tt]
    assert np.abs(got - want).max() < 1e-10


def test_compensated_gradient_drops_the_gate():
    gen = _gen(15)
    d, l, t = 6, 3, 5
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    readout = gen.normal(size=(t, d))

    p_unc = _prefix(gen, l, d, compensate=False, scales=False)
    p_cal = PrefixParams(Tensor(p_unc.p_k.data.copy()), Tensor(p_unc.p_v.data.copy()),
                         Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
                         compensate=True, learnable_scales=True)
    g_unc = _pv_grad(p_unc, e, wq, wk, wv, 1, readout, reparam=False)
    g_cal = _pv_grad(p_cal, e, wq, wk, wv, 1, readout, reparam=True)

    q = e @ wq.data
    plog = q @ p_unc.p_k.data.T / np.sqrt(d)
    clog = q @ (e @ wk.data).T / np.sqrt(d)
    full = softmax_rows(np.hstack([plog, clog]))
    lam_bar = full[:, :l].sum(axis=1).mean()

    ratio = np.linalg.norm(g_cal) / np.linalg.norm(g_unc)
    assert abs(ratio * lam_bar - 1.0) < 0.2


def test_gate_detachment_controls_key_gradient_path():
    gen = _gen(16)
    d, l, t = 6, 2, 4
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    readout = gen.normal(size=(t, d))

    grads = {}
    for lam_grad in (False, True):
        p = _prefix(_gen(99), l, d, compensate=True, scales=True, lam_grad=lam_grad)
        p.p_k.requires_grad = True
        out = calibrated_prefix_attention(p, Tensor(e), wq, wk, wv, 1)
        T.reduce_sum(T.mul(out, Tensor(readout))).backward()
        grads[lam_grad] = p.p_k.grad.copy()
    # same forward, different gradient once the gate joins the graph
    assert not np.allclose(grads[False], grads[True])


def test_learnable_scales_receive_gradients():
    gen = _gen(17)
    d, l, t = 6, 2, 4
    e = gen.normal(size=(t, d))
    wq, wk, wv = _proj(gen, d)
    p = _prefix(gen, l, d, compensate=True, scales=True, requires_grad=True)
    out = calibrated_prefix_attention(p, Tensor(e), wq, wk, wv, 1)
    T.reduce_sum(out).backward()
    assert p.s_k.grad is not None and abs(p.s_k.grad) > 0
    assert p.s_v.grad is not None and abs(p.s_v.grad) > 0


# ---------------------------------------------------------------------------
# module sets


def _cfg():
    return BackboneConfig(depth=4, model_dim=16, heads=2, mlp_ratio=2,
                          input_tokens=4, patch_dim=4)


def test_default_blocks_cover_first_half():
    pets = build_pet_set("adapter", 4, _cfg(), _gen(0))
    assert sorted({pt.block for pt, _ in pets.entries}) == [0, 1]


def test_param_counts_match_closed_forms():
    cfg = _cfg()
    d, r, k = cfg.model_dim, 4, 2
    adapter = build_pet_set("adapter", r, cfg, _gen(0))
    assert adapter.param_count() == k * (2 * d * r + 1)
    seq = build_pet_set("adapter", r, cfg, _gen(0), adapter_mode="sequential")
    assert seq.param_count() == k * (2 * d * r)
    lora = build_pet_set("lora", r, cfg, _gen(0))
    assert lora.param_count() == k * (2 * (2 * d * r + 1))
    prefix = build_pet_set("prefix", r, cfg, _gen(0))
    assert prefix.param_count() == k * (2 * r * d + 2)
    plain_prefix = build_pet_set("prefix", r, cfg, _gen(0),
                                 prefix_compensate=False, prefix_scales=False)
    assert plain_prefix.param_count() == k * (2 * r * d)


def test_build_validations():
    cfg = _cfg()
    with pytest.raises(ValueError, match="outside depth"):
        build_pet_set("adapter", 4, cfg, _gen(0), blocks=[4])
    with pytest.raises(ValueError, match="rank"):
        build_pet_set("lora", 32, cfg, _gen(0))
    with pytest.raises(ValueError, match="kind"):
        build_pet_set("prompt", 4, cfg, _gen(0))
    with pytest.raises(ValueError, match="size"):
        PETSet("adapter", 0, [])


def test_duplicate_attachment_rejected():
    cfg = _cfg()
    pets = build_pet_set("adapter", 2, cfg, _gen(0), blocks=[0])
    point, params = pets.entries[0]
    with pytest.raises(ValueError, match="duplicate"):
        PETSet("adapter", 2, [(point, params), (point, params)])


def test_heterogeneous_set_rejected():
    cfg = _cfg()
    adapter = build_pet_set("adapter", 2, cfg, _gen(0), blocks=[0])
    with pytest.raises(ValueError, match="heterogeneous"):
        PETSet("lora", 2, adapter.entries)


def test_flatten_round_trip_and_layout_guard():
    cfg = _cfg()
    pets = build_pet_set("prefix", 3, cfg, _gen(0))
    vec, layout = pet_flatten(pets)
    assert vec.shape == (pets.param_count(),)
    clone = pets.clone()
    assert clone.layout() == layout
    perturbed = vec + 1.0
    pet_unflatten(clone, perturbed, layout)
    vec2, _ = pet_flatten(clone)
    assert np.array_equal(vec2, perturbed)
    # original untouched
    assert np.array_equal(pet_flatten(pets)[0], vec)

    other = build_pet_set("prefix", 4, cfg, _gen(0))
    with pytest.raises(ValueError, match="layout"):
        pet_unflatten(other, vec, layout)
    with pytest.raises(ValueError, match="length"):
        pet_unflatten(pets, vec[:-1])


def test_clone_is_independent_and_flag_controlled():
    cfg = _cfg()
    pets = build_pet_set("adapter", 2, cfg, _gen(0))
    frozen = pets.clone(trainable=False)
    assert all(not p.requires_grad for _, p in frozen.named_params())
    name0, p0 = frozen.named_params()[0]
    p0.data = p0.data + 5.0
    assert not np.array_equal(pets.named_params()[0][1].data, p0.data)


def test_lookup_finds_attached_modules():
    cfg = _cfg()
    pets = build_pet_set("lora", 2, cfg, _gen(0), blocks=[1])
    assert pets.lookup(1, "attn-qv-lora") is not None
    assert pets.lookup(0, "attn-qv-lora") is None
    assert pets.lookup(1, "attn-prefix") is None
