import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sprkit import autodiff as ad
from sprkit import model as M
from sprkit.autodiff import AdamState, Tensor
from sprkit.model import ModelConfig, TrainConfig

TINY = ModelConfig(input_crop=8, fc_width=16, ur_blocks=1, output_extent=8, conv_channels=8)


def closed_form_params(cfg: ModelConfig) -> int:
    """Parameter count written out layer by layer, independent of layer_plan."""
    k2, w, F = cfg.input_crop ** 2, cfg.fc_width, cfg.fc_count
    total = (k2 * w + w) + (F - 1) * (w * w + w) + (F - 1)
    c, r2 = cfg.conv_channels, cfg.shuffle_factor ** 2
    total += 9 * c + c
    for i in range(cfg.ur_blocks):
        d = max(1, c // cfg.attn_reduction)
        unit = 2 * (9 * c * c + c + 3 * c) + cfg.attention_per_ur * (3 * (c * d + d) + d * c + c) + c
        total += cfg.residual_units_per_ur * unit + 9 * c * c + c
        if i < cfg.n_upsample:
            c //= r2
    p = cfg.post_channels or c
    return total + 9 * c * p + p + p + 9 * p * 2 + 2


def inputs(cfg, B, seed=0):
    return np.random.default_rng(seed).integers(0, 4096, (B, 1, cfg.input_crop, cfg.input_crop)).astype(float)


def randomize(params, seed, names=(".out.W", ".out.b")):
    rng = np.random.default_rng(seed)
    for n, t in params.items():
        if n.endswith(names):
            t.data = rng.normal(0, 0.1, t.shape)


# -- configuration ------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(fc_width=1000), dict(dropout_count=4), dict(output_extent=64),
                                dict(ur_blocks=0), dict(attention_per_ur=3), dict(dropout_rate=1.0),
                                dict(conv_channels=6)])
def test_model_config_rejects(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr=0.0), dict(gamma=0.0), dict(gamma=1.1), dict(batch=0)])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_step_lr():
    assert M.step_lr(1e-4, 250, 100, 0.9) == pytest.approx(8.1e-5, rel=1e-12)
    assert M.step_lr(1e-4, 99, 100, 0.9) == 1e-4
    assert M.step_lr(1e-4, 100, 100, 0.9) == pytest.approx(9e-5, rel=1e-12)


# -- parameter counts ---------------------------------------------------------

def test_default_counts():
    c = M.count_params(M.FULL_MODEL)
    assert 19.1e6 <= c["total"] <= 19.5e6
    assert M.fc_param_count(M.FULL_MODEL) == (16384 * 1024 + 1024) + 2 * (1024 * 1024 + 1024) == 18_877_440
    big = M.count_params(ModelConfig(input_crop=256))["total"]
    assert abs(big - 69.6e6) <= 0.01 * 69.6e6


ABLATION_GRID = ([dict(input_crop=k) for k in (32, 64, 128, 256)]
                 + [dict(fc_width=256, ur_blocks=3), dict(fc_width=4096, ur_blocks=2, upsample_blocks=1)]
                 + [dict(dropout_count=n) for n in (0, 2, 3)]
                 + [dict(attention_per_ur=a) for a in (0, 1)]
                 + [dict(residual_units_per_ur=u) for u in (0, 2)]
                 + [dict(input_crop=32, fc_width=256, ur_blocks=1, output_extent=32, conv_channels=32),
                    dict(attn_reduction=1), dict(post_channels=16)])


@pytest.mark.parametrize("kw", ABLATION_GRID, ids=lambda kw: ",".join(f"{k}={v}" for k, v in kw.items()))
def test_count_matches_closed_form(kw):
    cfg = ModelConfig(**kw)
    assert M.count_params(cfg)["total"] == closed_form_params(cfg)


@pytest.mark.parametrize("kw", [g for g in ABLATION_GRID if g.get("input_crop", 128) <= 128],
                         ids=lambda kw: ",".join(f"{k}={v}" for k, v in kw.items()))
def test_count_matches_allocation(kw):
    cfg = ModelConfig(**kw)
    p = M.build(cfg, seed=0, dtype=np.float32)
    assert p.numel() == M.count_params(cfg)["total"]
    assert all(np.isfinite(t.data).all() for _, t in p.items())


def test_counts_monotone_in_fc_width():
    a = M.count_params(ModelConfig(fc_width=256, ur_blocks=3))["total"]
    b = M.count_params(ModelConfig())["total"]
    assert a < b


def test_flops_band():
    from sprkit.metrics import count_flops
    assert 1.0e9 <= count_flops(M.FULL_MODEL) <= 1.8e9


# -- build / forward ----------------------------------------------------------

def test_build_deterministic_and_init():
    a, b = M.build(M.DESK_MODEL, seed=3), M.build(M.DESK_MODEL, seed=3)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)
    assert not np.array_equal(M.build(M.DESK_MODEL, seed=4)["fc.0.W"].data, a["fc.0.W"].data)
    g = a.groups()
    assert np.all(g["ur.0.res.0.attn.0.out"]["W"].data == 0)
    assert np.all(g["ur.0.res.0.block.0.norm"]["gamma"].data == 1)
    assert np.all(g["fc.0"]["b"].data == 0)
    bound = math.sqrt(6 / 1024)
    assert np.abs(g["fc.0"]["W"].data).max() <= bound


def test_desk_shape():
    re, im = M.forward(M.build(M.DESK_MODEL), inputs(M.DESK_MODEL, 2))
    assert re.shape == im.shape == (2, 1, 32, 32)


@pytest.mark.slow
def test_default_shape():
    params = M.build(M.FULL_MODEL, dtype=np.float32)
    with ad.no_grad():
        re, im = M.forward(params, inputs(M.FULL_MODEL, 1))
    assert re.shape == im.shape == (1, 1, 128, 128)


def test_input_shape_error():
    with pytest.raises(ValueError):
        M.forward(M.build(TINY), np.zeros((1, 1, 9, 9)))
    with pytest.raises(ValueError):
        M.forward(M.build(TINY), np.zeros((1, 1, 8, 8)), mode="test")


def test_eval_pure_and_batch_independent():
    params = M.build(M.DESK_MODEL, seed=1)
    randomize(params, 2)
    x = inputs(M.DESK_MODEL, 4, seed=5)
    a, b = M.predict(params, x), M.predict(params, x)
    assert a.tobytes() == b.tobytes()
    looped = np.concatenate([M.predict(params, x[i:i + 1]) for i in range(4)])
    assert np.abs(looped - a).max() <= 1e-6
    regrouped = np.concatenate([M.predict(params, x[:3]), M.predict(params, x[3:])])
    assert np.abs(regrouped - a).max() <= 1e-6


def test_train_mode_seeded():
    params = M.build(M.DESK_MODEL, seed=1)
    x = inputs(M.DESK_MODEL, 2)
    run = lambda s: M.forward(params, x, "train", np.random.default_rng(s))[0].data
    assert run(7).tobytes() == run(7).tobytes()
    assert not np.array_equal(run(7), run(8))
    assert not np.array_equal(run(7), M.forward(params, x, "eval")[0].data)


def test_non_finite_names_layer():
    params = M.build(TINY)
    params["ur.0.up.W"].data[0, 0, 0, 0] = np.inf
    with pytest.raises(ad.NonFiniteError, match="ur.0.up"):
        M.forward(params, inputs(TINY, 1))


# -- attention ----------------------------------------------------------------

def attn_params(C, seed, d=None):
    rng = np.random.default_rng(seed)
    d = d or C
    p = {}
    for name, (co, ci) in {"theta": (d, C), "phi": (d, C), "g": (d, C), "out": (C, d)}.items():
        p[f"a.{name}.W"] = Tensor(rng.normal(size=(co, ci, 1, 1)))
        p[f"a.{name}.b"] = Tensor(rng.normal(size=(co,)))
    return p


def test_attention_constant_input():
    C, H, W = 3, 4, 5
    p = attn_params(C, 0)
    v = np.random.default_rng(1).normal(size=C)
    x = np.broadcast_to(v[None, :, None, None], (2, C, H, W)).copy()
    out = M.self_attention(Tensor(x), p, "a").data
    Wg, bg = p["a.g.W"].data[:, :, 0, 0], p["a.g.b"].data
    Wo, bo = p["a.out.W"].data[:, :, 0, 0], p["a.out.b"].data
    expected = v + Wo @ (Wg @ v + bg) + bo
    np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape), atol=1e-12)


def attention_oracle(x, p):
    """Per-sample loops over positions with an explicit softmax."""
    B, C, H, W = x.shape
    proj = lambda n, z: np.einsum("oc,cn->on", p[f"a.{n}.W"].data[:, :, 0, 0], z) + p[f"a.{n}.b"].data[:, None]
    out = np.empty_like(x)
    for b in range(B):
        z = x[b].reshape(C, H * W)
        key, query, value = proj("theta", z), proj("phi", z), proj("g", z)
        mixed = np.zeros_like(value)
        for n in range(H * W):
            s = np.array([query[:, n] @ key[:, m] for m in range(H * W)])
            w = np.exp(s - s.max())
            mixed[:, n] = value @ (w / w.sum())
        out[b] = (z + proj("out", mixed)).reshape(C, H, W)
    return out


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_attention_matches_oracle(B, C, H, W, seed):
    p = attn_params(C, seed, d=max(1, C // 2))
    x = np.random.default_rng(seed + 1).normal(size=(B, C, H, W))
    out = M.self_attention(Tensor(x), p, "a").data
    assert out.shape == x.shape
    np.testing.assert_allclose(out, attention_oracle(x, p), atol=1e-10)


def test_attention_identity_at_init():
    full = M.build(M.DESK_MODEL, seed=2)
    for t in full.tensors.values():
        if ".attn." in t.name and ".out." not in t.name:
            t.data = np.random.default_rng(0).normal(size=t.shape)
    bare_cfg = ModelConfig(**{**M.DESK_MODEL.to_dict(), "attention_per_ur": 0})
    bare = M.build(bare_cfg, seed=9)
    for n in bare:
        bare[n].data = full[n].data.copy()
    x = inputs(M.DESK_MODEL, 2)
    np.testing.assert_array_equal(M.predict(full, x), M.predict(bare, x))


# -- loss ---------------------------------------------------------------------

def test_loss_hand_examples():
    xr = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
    z = np.zeros_like(xr)
    assert float(M.loss(Tensor(xr), Tensor(z), z, z, 0.0).data) == pytest.approx(0.5)
    assert float(M.loss(Tensor(xr), Tensor(z), xr, z, 1.0).data) == pytest.approx(0.5)
    c = np.full((1, 1, 3, 3), 0.4)
    assert float(M.loss(Tensor(c), Tensor(-c), c, -c, 1.0).data) == 0.0


def test_loss_shape_error():
    with pytest.raises(ValueError):
        M.loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 3, 3)),
               np.zeros((1, 1, 3, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 3))
def test_loss_nonnegative_and_zero_iff(seed, alpha):
    rng = np.random.default_rng(seed)
    a, b, c, d = (rng.normal(size=(2, 1, 4, 4)) for _ in range(4))
    assert float(M.loss(Tensor(a), Tensor(b), c, d, alpha).data) >= 0
    # exact match on a non-constant prediction leaves only the TV term
    tv = float(M.loss(Tensor(a), Tensor(b), a, b, alpha).data)
    assert (tv > 0) == (alpha > 0)


# -- gradients ----------------------------------------------------------------

def kink_free_fixture(cfg, B=1, seed=0):
    """Randomised parameters with PReLU slopes near 1 and targets far from the outputs.

    Central differences with h=1e-5 then stay clear of PReLU and |.| kinks.
    """
    params = M.build(cfg, seed=1)
    rng = np.random.default_rng(seed)
    for n, t in params.items():
        if n.endswith((".out.W", ".b")) or ".norm." in n:
            t.data = rng.normal(0, 0.1, t.shape)
        if n.endswith(".a"):
            t.data = rng.uniform(0.6, 0.9, t.shape)
    x = rng.uniform(0, 4095, (B, 1, cfg.input_crop, cfg.input_crop))
    shape = (B, 1, cfg.output_extent, cfg.output_extent)
    tr, ti = rng.normal(size=shape) + 10, rng.normal(size=shape) - 10
    return params, lambda: M.loss(*M.forward(params, x, "eval"), tr, ti, 1.0)


def test_small_model_gradcheck():
    cfg = ModelConfig(input_crop=8, fc_width=64, ur_blocks=2, output_extent=16, conv_channels=16,
                      upsample_blocks=1, attn_reduction=4)
    params, f = kink_free_fixture(cfg, B=2)
    errs = ad.grad_check_params(f, params.tensors, samples=50, rng=np.random.default_rng(0))
    assert len(errs) == len(params)
    assert max(errs.values()) < 1e-4, max(errs.items(), key=lambda kv: kv[1])


def test_adam_step_decreases_batch_loss():
    params = M.build(M.DESK_MODEL, seed=0)
    from sprkit.dataset import DESK_SYNTHESIS, SynthesisConfig, build_dataset, synthetic_corpus
    ds = build_dataset(synthetic_corpus(4, 32, seed=0), SynthesisConfig(**DESK_SYNTHESIS))
    data = M.TrainData.from_samples(ds.samples)
    idx = np.arange(4)
    before = M.batch_loss(params, data, idx, 1.0)
    before.backward()
    ad.adam_step(params.tensors, AdamState(lr=TrainConfig().lr))
    with ad.no_grad():
        after = M.batch_loss(params, data, idx, 1.0)
    assert float(after.data) < float(before.data)


# -- training and checkpoints -------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    rng = np.random.default_rng(0)
    ph = rng.uniform(-np.pi, np.pi, (3, 1, 8, 8))
    return M.TrainData(rng.integers(0, 4096, (3, 1, 8, 8)).astype(float), np.cos(ph), np.sin(ph))


def test_train_reproducible(tiny_data):
    tc = TrainConfig(epochs=3, batch=2, lr=1e-3, lr_step=2)
    a = M.train(M.build(TINY, seed=0), tiny_data, tc)
    b = M.train(M.build(TINY, seed=0), tiny_data, tc)
    assert [r.epoch for r in a.history] == [1, 2, 3]
    assert [r.lr for r in a.history] == [1e-3, 1e-3, 1e-3 * 0.9]
    assert a.history == b.history
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_resume_matches_uninterrupted(tiny_data, tmp_path):
    tc = TrainConfig(epochs=5, batch=2, lr=1e-3, lr_step=2, checkpoint_every=3)
    full = M.train(M.build(TINY, seed=0), tiny_data, tc,
                   checkpoint=lambda e, p, s: M.save_checkpoint(p, s, e, tmp_path / f"e{e}.sprc"))
    ck = M.load_checkpoint(tmp_path / "e3.sprc")
    assert ck.epoch == 3 and ck.state.t == 6
    params = M.from_checkpoint(ck)
    rest = M.train(params, tiny_data, tc, state=ck.state, start_epoch=ck.epoch)
    assert [r.epoch for r in rest.history] == [4, 5]
    assert rest.history == full.history[3:]
    assert all(params[n].data.tobytes() == full.params[n].data.tobytes() for n in params)


def test_resume_at_100_decays_once(tiny_data, tmp_path):
    tc = TrainConfig(epochs=100, batch=3, lr=1e-3)
    res = M.train(M.build(TINY, seed=0), tiny_data, tc)
    assert {r.lr for r in res.history} == {1e-3}
    M.save_checkpoint(res.params, res.state, 100, tmp_path / "c.sprc")
    ck = M.load_checkpoint(tmp_path / "c.sprc")
    more = M.train(M.from_checkpoint(ck), tiny_data, TrainConfig(epochs=102, batch=3, lr=1e-3),
                   state=ck.state, start_epoch=ck.epoch)
    assert [r.epoch for r in more.history] == [101, 102]
    assert [r.lr for r in more.history] == [1e-3 * 0.9] * 2
    assert more.state.t == 102


def test_checkpoint_round_trip(tiny_data, tmp_path):
    res = M.train(M.build(TINY, seed=0), tiny_data, TrainConfig(epochs=2, batch=2, lr=1e-3))
    path = tmp_path / "a.sprc"
    M.save_checkpoint(res.params, res.state, 2, path, extra_config={"note": "x"})
    ck = M.load_checkpoint(path)
    assert ck.config["note"] == "x" and ck.epoch == 2
    for n, t in res.params.items():
        assert ck.arrays[n].tobytes() == t.data.tobytes()
        assert ck.state.m[n].tobytes() == res.state.m[n].tobytes()
        assert ck.state.v[n].tobytes() == res.state.v[n].tobytes()
    assert (ck.state.t, ck.state.lr, ck.state.beta1) == (res.state.t, res.state.lr, res.state.beta1)
    M.save_checkpoint(M.from_checkpoint(ck), ck.state, 2, tmp_path / "b.sprc", extra_config={"note": "x"})
    assert (tmp_path / "b.sprc").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    p = M.build(TINY)
    path = tmp_path / "c.sprc"
    M.save_checkpoint(p, AdamState(), 0, path)
    other = M.build(ModelConfig(**{**TINY.to_dict(), "conv_channels": 4}))
    with pytest.raises(M.CheckpointError, match="ur.0.lift.W"):
        M.restore(other, M.load_checkpoint(path))
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(M.CheckpointError, match="magic"):
        M.load_checkpoint(tmp_path / "bad")
    (tmp_path / "ver").write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(M.CheckpointError, match="version"):
        M.load_checkpoint(tmp_path / "ver")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(M.CheckpointError, match="truncated"):
        M.load_checkpoint(tmp_path / "short")


def test_training_error_names_batch(tiny_data):
    bad = M.TrainData(np.full_like(tiny_data.inputs, np.nan), tiny_data.target_re, tiny_data.target_im)
    with pytest.raises(M.TrainingError, match="batch 0"):
        M.train(M.build(TINY), bad, TrainConfig(epochs=1, batch=2))


def test_empty_training_set():
    with pytest.raises(ValueError):
        M.TrainData(np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8)), np.zeros((0, 1, 8, 8)))


def test_history_csv(tiny_data, tmp_path):
    res = M.train(M.build(TINY), tiny_data, TrainConfig(epochs=2, batch=3))
    M.write_history(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,eval_psnr" and len(lines) == 3
