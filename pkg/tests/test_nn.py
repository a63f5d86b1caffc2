import numpy as np
import numpy.testing as npt
import pytest

from mixtrain import nn
from mixtrain import tensor as T
from mixtrain.nn import BackboneConfig, ConfigError, MixModel, make_mask_plan, patchify, unpatchify
from mixtrain.tensor import GradientTape, Tensor, backward

from conftest import finite_difference, max_rel_error


def tiny_cfg(**kw):
    base = dict(input_height=8, input_width=8, channels=1, patch_size=4,
                embed_dim=16, depth=2, num_heads=2)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_model(dtype=np.float64, seed=0, tasks={0: 3}, **cfg_kw):
    return MixModel(tiny_cfg(**cfg_kw), tasks, mask_ratio=0.5,
                    rng=np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------

def test_patchify_counts_small():
    cfg = BackboneConfig(input_height=4, input_width=4, channels=1, patch_size=2,
                         embed_dim=8, depth=1, num_heads=1)
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    toks = patchify(img, cfg)
    assert toks.shape == (4, 4)
    npt.assert_array_equal(toks[0], [0, 1, 4, 5])
    npt.assert_array_equal(toks[3], [10, 11, 14, 15])


def test_patchify_32x32_rgb_patch2():
    cfg = BackboneConfig(input_height=32, input_width=32, channels=3, patch_size=2,
                         embed_dim=64, depth=1, num_heads=1)
    toks = patchify(np.zeros((3, 32, 32), dtype=np.float32), cfg)
    assert toks.shape == (256, 12)


def test_patchify_roundtrip(rng):
    cfg = tiny_cfg(channels=3, patch_size=2)
    x = rng.normal(size=(5, 3, 8, 8)).astype(np.float32)
    npt.assert_array_equal(unpatchify(patchify(x, cfg), cfg), x)


def test_patchify_indivisible_rejected():
    with pytest.raises(ConfigError, match="divide"):
        BackboneConfig(input_height=10, input_width=10, patch_size=3,
                       embed_dim=8, depth=1, num_heads=1)


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------

def test_mask_plan_ratio_zero_is_empty():
    assert make_mask_plan(16, 0.0, 1).masked_indices.size == 0


def test_mask_plan_sixteen_tokens_ratio_075():
    plan = make_mask_plan(16, 0.75, 1)
    assert plan.masked_indices.size == 12
    assert np.all(np.diff(plan.masked_indices) > 0)
    assert plan.masked_indices.min() >= 0 and plan.masked_indices.max() < 16


def test_mask_plan_deterministic():
    a = make_mask_plan(64, 0.75, 99)
    b = make_mask_plan(64, 0.75, 99)
    npt.assert_array_equal(a.masked_indices, b.masked_indices)


def test_mask_plan_ratio_range():
    with pytest.raises(ConfigError):
        make_mask_plan(16, 1.0, 1)


# ---------------------------------------------------------------------------
# encode / classify
# ---------------------------------------------------------------------------

def test_encode_shape_law():
    m = tiny_model(dtype=np.float32)
    out = m.encode(Tensor(np.zeros((2, 4, 16), dtype=np.float32)))
    assert out.shape == (2, 4, 16)


def test_encode_zero_weights_ignores_input(rng):
    m = tiny_model(dtype=np.float64)
    for p in m.params.values():
        p.data = np.zeros_like(p.data)
    a = m.encode(Tensor(rng.normal(size=(1, 4, 16)))).data
    b = m.encode(Tensor(rng.normal(size=(1, 4, 16)))).data
    npt.assert_array_equal(a, b)


def test_encode_purity(rng):
    m = tiny_model(dtype=np.float32)
    x = Tensor(rng.normal(size=(2, 4, 16)).astype(np.float32))
    npt.assert_array_equal(m.encode(x).data, m.encode(x).data)


def test_encode_width_mismatch():
    m = tiny_model()
    with pytest.raises(T.DimensionError, match="16"):
        m.encode(Tensor(np.zeros((2, 4, 9))))


def test_classify_zero_head_gives_bias(rng):
    m = tiny_model(dtype=np.float64)
    m.params["cls0.head.w"].data[:] = 0.0
    m.params["cls0.head.b"].data[:] = [0.5, -1.0, 2.0]
    feats = m.encode(Tensor(rng.normal(size=(4, 4, 16))))
    logits = m.classify(feats, 0)
    assert logits.shape == (4, 3)
    npt.assert_allclose(logits.data, np.tile([0.5, -1.0, 2.0], (4, 1)))


def test_classify_pool_is_permutation_invariant(rng):
    m = tiny_model(dtype=np.float64)
    feats = rng.normal(size=(2, 4, 16))
    base = m.classify(Tensor(feats), 0).data
    perm = m.classify(Tensor(feats[:, [2, 0, 3, 1], :]), 0).data
    npt.assert_allclose(perm, base, rtol=1e-12)


def test_classify_unknown_task():
    m = tiny_model()
    with pytest.raises(KeyError, match="task_id 7"):
        m.classify(Tensor(np.zeros((1, 4, 16))), 7)


def test_classify_never_reads_mask_plans(rng):
    # structural: reconstruction under two different plans, identical logits
    m = tiny_model(dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 4, 16)))
    target = Tensor(rng.normal(size=(2, 4, 16)))
    for seed in (1, 2):
        feats = m.encode(x)
        m.reconstruct(feats, make_mask_plan(4, 0.5, seed), target)
        logits = m.classify(feats, 0).data
        if seed == 1:
            first = logits
    npt.assert_array_equal(first, logits)


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def test_reconstruct_zero_ratio_all_is_plain_autoencoder(rng):
    m = tiny_model(dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 4, 16)))
    feats = m.encode(x)
    plan = make_mask_plan(4, 0.0, 1)
    loss = m.reconstruct(feats, plan, x, loss_target="all")
    pred = m._decode(feats, plan)
    npt.assert_allclose(loss.item(), np.mean((pred.data - x.data) ** 2), rtol=1e-12)


def test_reconstruct_perfect_decoder_stub_gives_zero(rng, monkeypatch):
    m = tiny_model(dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 4, 16)))
    monkeypatch.setattr(MixModel, "_decode", lambda self, f, plan: x)
    loss = m.reconstruct(m.encode(x), make_mask_plan(4, 0.5, 1), x)
    assert loss.item() == 0.0


def test_reconstruct_masked_rows_match_mse_path(rng):
    m = tiny_model(dtype=np.float64)
    x = Tensor(rng.normal(size=(3, 4, 16)))
    plan = nn.MaskPlan(token_count=4, masked_indices=np.array([1, 3]), seed=0)
    feats = m.encode(x)
    loss = m.reconstruct(feats, plan, x, loss_target="masked")
    pred = m._decode(feats, plan)
    direct = T.mse(Tensor(pred.data[:, [1, 3], :]), Tensor(x.data[:, [1, 3], :]))
    npt.assert_allclose(loss.item(), direct.item(), rtol=1e-12)


def test_reconstruct_plan_size_mismatch(rng):
    m = tiny_model()
    feats = m.encode(Tensor(np.zeros((1, 4, 16), dtype=np.float32)))
    with pytest.raises(T.DimensionError, match="plan"):
        m.reconstruct(feats, make_mask_plan(8, 0.5, 1), Tensor(np.zeros((1, 4, 16))))


def test_reconstruct_unknown_loss_target(rng):
    m = tiny_model()
    x = Tensor(np.zeros((1, 4, 16), dtype=np.float32))
    with pytest.raises(ConfigError, match="loss_target"):
        m.reconstruct(m.encode(x), make_mask_plan(4, 0.5, 1), x, loss_target="everything")


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

def test_every_param_belongs_to_exactly_one_component():
    m = tiny_model(tasks={0: 3, 1: 5})
    prefixes = ("backbone.", "recon.", "cls0.", "cls1.")
    for name in m.params:
        assert sum(name.startswith(p) for p in prefixes) == 1


def test_param_enumeration_stable_and_state_roundtrip():
    a = tiny_model(seed=4)
    b = tiny_model(seed=4)
    assert list(a.params) == list(b.params)
    for n in a.params:
        npt.assert_array_equal(a.params[n].data, b.params[n].data)
    state = {n: arr.copy() for n, arr in a.state_arrays().items()}
    c = tiny_model(seed=9)
    c.load_state(state)
    for n in a.params:
        npt.assert_array_equal(c.params[n].data, a.params[n].data)


def test_no_decay_covers_biases_and_norms():
    m = tiny_model()
    nd = m.no_decay
    assert "backbone.out_ln.g" in nd and "backbone.embed.b" in nd
    assert "backbone.embed.w" not in nd and "backbone.pos" not in nd


# ---------------------------------------------------------------------------
# end-to-end gradient check on the joint objective
# ---------------------------------------------------------------------------

def joint_loss(model, x_np, labels, plan, alpha):
    x = Tensor(x_np)
    feats = model.encode(x)
    l_sl = T.softmax_cross_entropy(model.classify(feats, 0), labels)
    l_ssl = model.reconstruct(feats, plan, Tensor(x_np), loss_target="masked")
    return T.add(T.scale(l_ssl, alpha), T.scale(l_sl, 1.0 - alpha))


@pytest.mark.parametrize("kind", ["transformer", "mlp"])
def test_joint_objective_gradcheck(kind, rng):
    m = tiny_model(dtype=np.float64, kind=kind, depth=2)
    x = rng.normal(size=(2, 4, 16))
    labels = np.array([0, 2])
    plan = make_mask_plan(4, 0.5, 3)
    # check a slice of parameters spanning every component
    names = ["backbone.embed.w", "backbone.block0.mlp.fc1.b", "backbone.out_ln.g",
             "recon.mask_token", "recon.proj.w", "cls0.head.w"]
    if kind == "transformer":
        names.append("backbone.block1.attn.q.w")

    def value():
        return joint_loss(m, x, labels, plan, 0.3).item()

    arrays = [m.params[n].data for n in names]
    fds = finite_difference(value, arrays, h=1e-4)
    with GradientTape():
        backward(joint_loss(m, x, labels, plan, 0.3))
    for name, fd in zip(names, fds):
        err = max_rel_error(m.params[name].grad, fd)
        assert err < 1e-4, f"{name}: rel err {err}"
