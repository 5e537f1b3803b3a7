import numpy as np
import pytest

from voxsem import autodiff as ad
from voxsem.errors import DivergenceError, ShapeError, StateError
from voxsem.fcm import CompletionContext, complete_array
from voxsem.fusion import (
    Batch, FusionConfig, FusionModel, ForwardTrace, TrainConfig, _stage_loss, evaluate, forward,
    forward_stage1, forward_stage2, loss_node, stage2_loss_value, train,
)


@pytest.fixture(scope="module")
def batch(scenes):
    return Batch.from_samples(scenes[:2])


def test_parameter_groups():
    c = FusionModel(FusionConfig(), 0)
    rgb1 = {n for n in c.params if n.startswith("rgb1.")}
    rgb2 = {n for n in c.params if n.startswith("rgb2.")}
    assert rgb1 and rgb2 and not rgb1 & rgb2
    assert not any(n.startswith("tsdf2.") for n in c.params)
    b = FusionModel(FusionConfig(reuse_tsdf=False), 0)
    assert any(n.startswith("tsdf2.") for n in b.params)
    a = FusionModel(FusionConfig(two_stage=False), 0)
    assert not any(n.startswith(("rgb2.", "head2.")) for n in a.params)


def test_trace_shapes(batch):
    model = FusionModel(FusionConfig(), 0)
    trace = forward(model, batch)
    dims = batch.tsdf.shape[2:]
    assert [t.shape[2:] for t in trace.tf] == [dims, tuple(d // 2 for d in dims), tuple(d // 4 for d in dims)]
    assert trace.logits1.shape == (2, 12) + dims
    assert np.allclose(trace.probs_stage2.sum(axis=1), 1.0)


def test_forward_deterministic(batch):
    p1 = forward(FusionModel(FusionConfig(), 5), batch).probs_stage2
    p2 = forward(FusionModel(FusionConfig(), 5), batch).probs_stage2
    assert np.array_equal(p1, p2)


def _scales(rng, width=8, dims=(8, 8, 8)):
    return [ad.constant(rng.normal(size=(1, width) + tuple(d // 2 ** s for d in dims))) for s in range(3)]


def test_fuse_symmetry_and_zero_identity():
    model = FusionModel(FusionConfig(), 1)
    rng = np.random.default_rng(0)
    f, g = _scales(rng), _scales(rng)
    fg = model.multiscale_fuse(f, g, "head1").value
    gf = model.multiscale_fuse(g, f, "head1").value
    assert np.array_equal(fg, gf)
    zeros = [ad.constant(np.zeros(x.shape)) for x in g]
    summed = [ad.constant(a.value + b.value) for a, b in zip(f, g)]
    assert np.allclose(model.multiscale_fuse(summed, zeros, "head1").value, fg)


def test_fuse_single_scale_degenerate():
    model = FusionModel(FusionConfig(activation=False), 2)
    for name in ("up2", "up1", "mix"):
        w = np.zeros((8, 8, 3, 3, 3))
        for c in range(8):
            w[c, c, 1, 1, 1] = 1.0
        model.params[f"head1.{name}.w"].value[...] = w
        model.params[f"head1.{name}.b"].value[...] = 0.0
    rng = np.random.default_rng(1)
    f, g = _scales(rng), _scales(rng)
    for s in (1, 2):
        f[s] = ad.constant(np.zeros(f[s].shape))
        g[s] = ad.constant(np.zeros(g[s].shape))
    logits = model.multiscale_fuse(f, g, "head1").value
    w, b = model.params["head1.cls.w"].value, model.params["head1.cls.b"].value
    expected = np.einsum("oi,bixyz->boxyz", w, f[0].value + g[0].value) + b[None, :, None, None, None]
    assert np.allclose(logits, expected)


def test_fuse_scale_mismatch():
    model = FusionModel(FusionConfig(), 0)
    rng = np.random.default_rng(0)
    f = _scales(rng)
    g = _scales(rng, dims=(8, 8, 4))
    with pytest.raises(ShapeError):
        model.multiscale_fuse(f, g, "head1")


def _zero_batch(batch):
    return Batch(np.zeros_like(batch.tsdf), np.zeros_like(batch.rf1), batch.gt, batch.counts, batch.visibility)


def test_zero_input_is_bias_response(batch):
    model = FusionModel(FusionConfig(), 3)
    zb = _zero_batch(batch)
    base = forward_stage1(model, zb).logits1.value
    model.params["tsdf.c1a.w"].value[...] *= -7.0
    model.params["rgb1.c2a.w"].value[...] += 1.0
    assert np.array_equal(forward_stage1(model, zb).logits1.value, base)


def test_linear_config_scales_rgb_response(batch):
    model = FusionModel(FusionConfig(activation=False), 4)
    zb = _zero_batch(batch)
    rb = Batch(zb.tsdf, batch.rf1, batch.gt, batch.counts, batch.visibility)
    r2 = Batch(zb.tsdf, 2 * batch.rf1, batch.gt, batch.counts, batch.visibility)
    bias = forward_stage1(model, zb).logits1.value
    one = forward_stage1(model, rb).logits1.value - bias
    two = forward_stage1(model, r2).logits1.value - bias
    assert np.allclose(two, 2 * one)


def test_stage2_oracle_mode_matches_fcm(batch):
    model = FusionModel(FusionConfig(class_source="gt"), 0)
    trace = forward(model, batch)
    for b in range(2):
        ctx = CompletionContext.from_scene(batch.gt[b], batch.counts[b], batch.visibility[b])
        assert np.array_equal(trace.rrf[0].value[b], complete_array(batch.rf1[b], ctx))
    assert np.array_equal(trace.class_maps, batch.gt)


def test_stage2_class_map_is_stage1_argmax(batch):
    trace = forward(FusionModel(FusionConfig(), 0), batch)
    assert np.array_equal(trace.class_maps, trace.probs_stage1.argmax(axis=1))


def test_stage2_state_errors(batch):
    with pytest.raises(StateError):
        forward_stage2(FusionModel(FusionConfig(), 0), ForwardTrace())
    a = FusionModel(FusionConfig(two_stage=False), 0)
    with pytest.raises(StateError):
        forward_stage2(a, forward_stage1(a, batch))


def _stage2_only_backward(model, batch, lam=0.5):
    model.zero_grad()
    trace = forward(model, batch)
    (ce, ent), g2 = _stage_loss(trace.logits2, batch.gt, lam)
    ad.backward(ad.external([trace.logits2], ce + lam * ent, [g2]))


def test_detachment_autodiff(batch):
    model = FusionModel(FusionConfig(), 0)
    _stage2_only_backward(model, batch)
    for name, p in model.params.items():
        if name.startswith(("rgb1.", "head1.")):
            assert not p.grad.any(), name
    assert any(p.grad.any() for n, p in model.params.items() if n.startswith("tsdf."))
    assert any(p.grad.any() for n, p in model.params.items() if n.startswith("rgb2."))


@pytest.mark.parametrize("source", ["pred", "gt"])
def test_detachment_finite_difference(batch, source):
    model = FusionModel(FusionConfig(), 0)
    base = stage2_loss_value(model, batch, 0.5, source)
    for name in [n for n in model.params if n.startswith("rgb1.")][:4]:
        value = model.params[name].value
        for h in (1e-6, -1e-6):
            value.flat[0] += h
            delta = stage2_loss_value(model, batch, 0.5, source) - base
            value.flat[0] -= h
            if source == "gt":
                assert delta == 0.0
            else:
                assert abs(delta) < 1e-9


def test_joint_loss_reaches_shared_branch(batch):
    model = FusionModel(FusionConfig(), 0)
    trace = forward(model, batch)
    root, terms = loss_node(trace, 0.5, 0.5)
    assert set(terms) == {"ce1", "ent1", "ce2", "ent2"}
    ad.backward(root)
    assert all(p.grad.any() for n, p in model.params.items() if n.endswith(".w"))


def test_training_is_reproducible(scenes):
    logs = []
    for _ in range(2):
        model = FusionModel(FusionConfig(), 9)
        logs.append(train(model, scenes[:4], TrainConfig(epochs=2, eval_every=1), seed=9, val=scenes[4:]).to_csv())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0].startswith("epoch,lr,loss")


def test_training_divergence(scenes):
    model = FusionModel(FusionConfig(two_stage=False), 0)
    with pytest.raises(DivergenceError) as exc:
        train(model, scenes[:2], TrainConfig(epochs=3, base_lr=1e12, lambda1=0), seed=0)
    assert exc.value.epoch >= 0


def test_training_needs_data():
    with pytest.raises(ValueError):
        train(FusionModel(FusionConfig(), 0), [], TrainConfig(epochs=1))


@pytest.mark.slow
def test_overfit_single_sample(scenes):
    model = FusionModel(FusionConfig(two_stage=False), 0)
    log = train(model, scenes[:1], TrainConfig(epochs=300, batch_size=1, lambda1=0, eval_every=0), seed=0)
    assert log.rows[-1]["loss"] < 0.05


def test_evaluate_reports(scenes):
    model = FusionModel(FusionConfig(), 0)
    res = evaluate(model, scenes[:3], bins=20)
    assert 0 <= res.miou_pre <= 1 and 0 <= res.miou_ref <= 1
    assert all(h.shape == (20,) for h in res.histograms.values())
    assert 0 <= res.mid_mass <= 1


def test_mismatch_diagnostic(scenes):
    pred = evaluate(FusionModel(FusionConfig(), 0), scenes[:2])
    oracle = evaluate(FusionModel(FusionConfig(class_source="gt"), 0), scenes[:2])
    assert 0 < pred.class_mismatch <= 1
    assert oracle.class_mismatch == 0.0
