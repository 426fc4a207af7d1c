import math

import numpy as np
import pytest

from ssp.embedder import (
    Adam,
    LpeConfig,
    LpeInputs,
    LpeModel,
    TrainConfig,
    Trainer,
    apply_transform,
    clip_global_norm,
    global_norm,
    load_checkpoint,
    lpe_inputs,
    neighborhood_radius,
    prepare_scene,
    sample_subgraph,
    save_checkpoint,
)
from ssp.embedder.layers import init_stack, l2_normalize, l2_normalize_backward
from ssp.errors import StateError, ValidationError
from ssp.gmpp import GmppConfig
from ssp.loss import LossConfig
from ssp.pointcloud import AugmentParams, SceneSpec, rotate_z, synth_scene

TINY = dict(k=5, m=4, mlp1_widths=[32, 32], mlp2_widths=[32, 4], st_mlp1_widths=[32, 32],
            st_mlp2_widths=[32, 4])


def random_inputs(rng, n=30, k=5, b=12):
    pos = rng.normal(size=(n, 3))
    col = rng.random((n, 3))
    nb = np.stack([rng.choice(np.delete(np.arange(n), i), k, replace=False) for i in range(n)])
    return lpe_inputs(pos, col, nb, np.arange(b))


def tiny_model(kind, seed):
    rng = np.random.default_rng(seed)
    model = LpeModel(LpeConfig(**TINY, norm_kind=kind), rng)
    # move the transform away from identity so its gradients are exercised
    model.params["st2.1.W"][:] = rng.normal(size=model.params["st2.1.W"].shape) * 0.3
    return model, random_inputs(rng), rng.normal(size=(12, 4))


# --------------------------------------------------------------------------- config and counts

def test_config_validation():
    LpeConfig().validate()
    assert LpeConfig(m=7).mlp2_widths == [64, 32, 32, 7]
    bad = [dict(k=1), dict(m=3, mlp2_widths=[8, 4]), dict(st_mlp2_widths=[8, 3]),
           dict(mlp1_widths=[]), dict(mlp1_widths=[0, 4]), dict(norm_kind="layer"),
           dict(norm_kind="group", mlp1_widths=[6, 128])]
    for kw in bad:
        with pytest.raises(ValidationError):
            LpeConfig(**kw).validate()


def test_single_layer_count():
    params = {}
    init_stack(params, {}, "x", 7, [5], "batch", np.random.default_rng(0), last_plain=True)
    assert sum(p.size for p in params.values()) == 7 * 5 + 5


def test_default_param_count():
    model = LpeModel(LpeConfig())
    linear = sum(v.size for k, v in model.params.items() if k.endswith((".W", ".b")))
    assert linear == 3828 + 4448 + 12100
    assert model.param_count == 21208
    assert model.param_count == sum(v.size for v in model.params.values())


def test_doubling_widths_roughly_quadruples():
    def linear_count(scale):
        cfg = LpeConfig(m=4 * scale, mlp1_widths=[32 * scale, 128 * scale],
                        mlp2_widths=[64 * scale, 32 * scale, 32 * scale, 4 * scale],
                        st_mlp1_widths=[16 * scale, 64 * scale], st_mlp2_widths=[32 * scale, 16 * scale, 4])
        return sum(v.size for k, v in LpeModel(cfg).params.items() if k.endswith(".W"))
    assert 3.3 < linear_count(2) / linear_count(1) < 4.1


# --------------------------------------------------------------------------- spatial transform

def test_radius_hand_value():
    centered = np.array([[[1.0, 0, 0], [-1.0, 0, 0]]])
    assert neighborhood_radius(centered)[0] == pytest.approx(math.sqrt(2 / 6))
    assert neighborhood_radius(np.zeros((1, 4, 3)))[0] == 1e-6


def test_vertical_neighbors_ignore_transform():
    pos = np.array([[0.0, 0, 0], [0, 0, 0.5], [0, 0, -0.2], [0, 0, 1.0]])
    nb = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    inp = lpe_inputs(pos, np.zeros((4, 3)), nb)
    assert np.all(inp.offsets[..., :2] == 0)
    omega = np.random.default_rng(0).normal(size=(4, 4))
    assert np.array_equal(apply_transform(inp.offsets, omega), inp.offsets)


def test_identity_initialization():
    model = LpeModel(LpeConfig())
    inp = random_inputs(np.random.default_rng(1), k=20, n=40)
    omega, _ = model.spatial_transform(inp.offsets, training=True)
    assert np.array_equal(omega, np.tile([1.0, 0, 0, 1], (len(inp), 1)))
    assert np.array_equal(apply_transform(inp.offsets, omega), inp.offsets)


def test_offsets_rotation_covariant():
    rng = np.random.default_rng(2)
    pos, col = rng.normal(size=(40, 3)), rng.random((40, 3))
    nb = np.stack([np.roll(np.arange(40), -i)[1:7] for i in range(40)])
    a = lpe_inputs(pos, col, nb)
    b = lpe_inputs(rotate_z(pos, 0.7), col, nb)
    c, s = math.cos(0.7), math.sin(0.7)
    rot = np.array([[c, s], [-s, c]])  # row vectors times rot
    assert np.allclose(b.offsets[..., :2], a.offsets[..., :2] @ rot)
    assert np.allclose(b.rad, a.rad) and np.allclose(b.height, a.height)
    model, _, _ = tiny_model("batch", 0)
    wa, _ = model.spatial_transform(a.offsets, training=False)
    wb, _ = model.spatial_transform(b.offsets, training=False)
    assert not np.allclose(wa, wb)


# --------------------------------------------------------------------------- forward

@pytest.mark.parametrize("kind", ["batch", "group"])
def test_unit_norm_and_invariances(kind):
    model, inp, _ = tiny_model(kind, 3)
    e = model.forward(inp)
    assert np.allclose(np.linalg.norm(e, axis=1), 1, atol=1e-12)
    perm = np.random.default_rng(0).permutation(inp.offsets.shape[1])
    shuffled = LpeInputs(inp.offsets[:, perm], inp.colors[:, perm], inp.height, inp.rad, inp.own_color)
    assert np.allclose(model.forward(shuffled), e, atol=1e-12)
    doubled = LpeInputs(np.concatenate([inp.offsets] * 2, axis=1), np.concatenate([inp.colors] * 2, axis=1),
                        inp.height, inp.rad, inp.own_color)
    assert np.allclose(model.forward(doubled), e, atol=1e-12)
    model.forward(inp)
    g0 = model.backward(np.ones_like(e))
    model.forward(shuffled)
    g1 = model.backward(np.ones_like(e))
    for key in g0:
        assert np.allclose(g0[key], g1[key], atol=1e-10)


def test_shape_mismatch():
    model, inp, _ = tiny_model("batch", 0)
    bad = LpeInputs(inp.offsets, inp.colors[:, :3], inp.height, inp.rad, inp.own_color)
    with pytest.raises(ValidationError):
        model.forward(bad)


def test_eval_mode_chunking_is_consistent():
    model, inp, _ = tiny_model("batch", 4)
    model.forward(inp)  # populate running statistics
    full = model.forward(inp, training=False)
    assert np.allclose(model.embed(inp, chunk=5), full, atol=1e-13)


# --------------------------------------------------------------------------- backward

def test_backward_requires_forward():
    model, inp, u = tiny_model("batch", 0)
    with pytest.raises(StateError):
        model.backward(u)
    model.forward(inp)
    model.backward(u)
    with pytest.raises(StateError):
        model.backward(u)


def test_zero_upstream_zero_grads():
    model, inp, u = tiny_model("group", 0)
    model.forward(inp)
    grads = model.backward(np.zeros_like(u))
    assert all(not g.any() for g in grads.values())


def test_l2_normalization_gradient():
    rng = np.random.default_rng(5)
    z, u = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    y, norm = l2_normalize(z)
    dz = l2_normalize_backward(u, y, norm)
    assert np.allclose(np.einsum("ij,ij->i", dz, y), 0, atol=1e-12)
    num = np.zeros_like(z)
    for j in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp.flat[j] += 1e-6
        zm.flat[j] -= 1e-6
        num.flat[j] = ((l2_normalize(zp)[0] - l2_normalize(zm)[0]) * u).sum() / 2e-6
    assert np.allclose(num, dz, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("kind", ["batch", "group"])
def test_parameter_gradients_finite_differences(kind):
    """Central differences with h=1e-4; probes that flip a ReLU or a pooling winner are skipped."""
    model, inp, u = tiny_model(kind, 0)
    f = lambda: float((model.forward(inp) * u).sum())
    f()
    pattern = model.activation_pattern()
    grads = model.backward(u)
    h, skipped, total = 1e-4, 0, 0
    for name, p in model.params.items():
        num = np.zeros_like(p)
        smooth = np.ones(p.shape, dtype=bool)
        for j in range(p.size):
            old = p.flat[j]
            p.flat[j] = old + h
            fp, pp = f(), model.activation_pattern()
            p.flat[j] = old - h
            fm, pm = f(), model.activation_pattern()
            p.flat[j] = old
            num.flat[j] = (fp - fm) / (2 * h)
            smooth.flat[j] = np.array_equal(pp, pattern) and np.array_equal(pm, pattern)
        total += p.size
        skipped += int((~smooth).sum())
        a, b = num[smooth], grads[name][smooth]
        rel = np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
        assert rel < 1e-4, (name, rel)
    assert skipped < 0.1 * total


# --------------------------------------------------------------------------- optimizer

def test_adam_zero_gradient_is_identity():
    params = {"w": np.arange(6.0).reshape(2, 3)}
    before = params["w"].copy()
    Adam(params).step(params, {"w": np.zeros((2, 3))}, lr=0.1)
    assert np.array_equal(params["w"], before)


def test_adam_first_step_is_signed_lr():
    params = {"w": np.zeros(3)}
    Adam(params).step(params, {"w": np.array([2.0, -0.5, 1e-3])}, lr=0.01)
    assert np.allclose(params["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_clipping():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(13.0)
    assert global_norm(grads) == pytest.approx(1.0)
    small = {"a": np.array([0.3])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.3


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == cfg.lr_at(19) == 0.01
    assert cfg.lr_at(20) == pytest.approx(0.007)
    assert cfg.lr_at(49) == pytest.approx(0.01 * 0.7 ** 3)


# --------------------------------------------------------------------------- training

def two_object_scenes(n):
    spec = SceneSpec(n_planes=1, n_boxes=1, n_spheres=0, points_per_object=150, min_points=20)
    return [prepare_scene(synth_scene(spec, s), 10, 5) for s in range(n)]


def small_trainer(seed=0, epochs=3, scenes=None):
    lpe = LpeConfig(k=10, mlp1_widths=[16, 32], mlp2_widths=[16, 4], st_mlp1_widths=[8, 16],
                    st_mlp2_widths=[8, 4])
    model = LpeModel(lpe, np.random.default_rng([seed, 0]))
    cfg = TrainConfig(epochs=epochs, batch_size=2, subgraph_size=200, decay_epochs=[2])
    return Trainer(model, scenes or two_object_scenes(2), cfg, GmppConfig(n_min_base=5), LossConfig(),
                   np.random.default_rng([seed, 1]))


def test_empty_dataset_rejected():
    model = LpeModel(LpeConfig())
    with pytest.raises(ValidationError):
        Trainer(model, [], TrainConfig(), GmppConfig(), LossConfig(), np.random.default_rng(0))


def test_subgraph_sampling():
    scene = two_object_scenes(1)[0]
    rng = np.random.default_rng(0)
    verts = sample_subgraph(scene.graph, 100, rng)
    assert len(verts) == 100 and np.all(np.diff(verts) > 0)
    assert np.array_equal(sample_subgraph(scene.graph, 10**6, rng), np.arange(scene.graph.n_vertices))


def test_training_is_deterministic():
    scenes = two_object_scenes(2)
    a, b = small_trainer(scenes=scenes), small_trainer(scenes=scenes)
    a.run()
    b.run()
    for key in a.model.params:
        assert np.array_equal(a.model.params[key], b.model.params[key])
    assert a.history == b.history
    assert len(a.history) == 3 and a.history[-1]["lr"] == pytest.approx(0.007)


def test_validation_interval():
    tr = small_trainer(epochs=5)
    tr.val_scenes = two_object_scenes(1)
    tr.cfg.val_every = 2
    assert [h["val"] is not None for h in tr.run()] == [False, True, False, True, True]
    with pytest.raises(ValidationError):
        TrainConfig(val_every=0).validate()


def test_loss_decreases_on_two_object_scene():
    tr = small_trainer(epochs=20, scenes=two_object_scenes(4))
    losses = np.array([h["loss"] for h in tr.run()])
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0]
    assert np.corrcoef(np.arange(len(smooth)), smooth)[0, 1] < 0


def test_checkpoint_roundtrip_and_resume(tmp_path):
    scenes = two_object_scenes(2)
    full = small_trainer(epochs=3, scenes=scenes)
    full.run()
    part = small_trainer(epochs=1, scenes=scenes)
    part.run()
    save_checkpoint(tmp_path / "c.json", part.model, part)
    resumed = small_trainer(epochs=3, scenes=scenes)
    load_checkpoint(tmp_path / "c.json", resumed.model, resumed)
    assert resumed.epoch == 1
    resumed.run()
    for key in full.model.params:
        assert np.array_equal(full.model.params[key], resumed.model.params[key])
    assert full.history == resumed.history


def test_zero_epochs_checkpoint_is_initialization(tmp_path):
    tr = small_trainer(epochs=0)
    init = {k: v.copy() for k, v in tr.model.params.items()}
    tr.run()
    save_checkpoint(tmp_path / "m.json", tr.model, tr)
    loaded = load_checkpoint(tmp_path / "m.json")
    for key, value in init.items():
        assert np.array_equal(loaded.params[key], value)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    model = LpeModel(LpeConfig(**TINY))
    save_checkpoint(tmp_path / "m.json", model)
    other = LpeModel(LpeConfig(**dict(TINY, mlp1_widths=[32, 64])))
    with pytest.raises(ValidationError, match="mlp1.1.W"):
        load_checkpoint(tmp_path / "m.json", other)
    (tmp_path / "m.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValidationError, match="corrupt"):
        load_checkpoint(tmp_path / "m.json")


def test_train_config_validation():
    for bad in (dict(epochs=-1), dict(lr=0), dict(batch_size=0), dict(decay_factor=1.5),
                dict(gmpp_outer_iters=0), dict(augment=AugmentParams(sigma=-1))):
        with pytest.raises(ValidationError):
            TrainConfig(**bad).validate()


@pytest.mark.parametrize("kind", ["batch", "group"])
def test_norm_layer_input_gradient(kind):
    from ssp.embedder.layers import _norm_backward, _norm_forward
    rng = np.random.default_rng(6)
    x, gamma, beta, u = (rng.normal(size=(7, 16)), rng.normal(size=16), rng.normal(size=16),
                         rng.normal(size=(7, 16)))
    buffers = {"n.mean": np.zeros(16), "n.var": np.ones(16)}
    f = lambda x: (_norm_forward(x, gamma, beta, kind, True, buffers, "n")[0] * u).sum()
    _, cache = _norm_forward(x, gamma, beta, kind, True, buffers, "n")
    dx, _, _ = _norm_backward(u, gamma, cache, kind)
    num = np.zeros_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += 1e-5
        xm.flat[j] -= 1e-5
        num.flat[j] = (f(xp) - f(xm)) / 2e-5
    assert np.allclose(num, dx, atol=1e-8)
