import dataclasses
import struct

import numpy as np
import pytest

from mldrnet import model as M
from mldrnet import ndcore
from mldrnet.fusion import FUSION_KINDS
from mldrnet.layers import grad_check, softmax_cross_entropy


def images(rng, n=2, size=64):
    return rng.uniform(0, 1, size=(n, 3, size, size))


@pytest.fixture(scope="module")
def desk():
    return M.build(M.desk_config(seed=1))


def closed_form_param_count(trunk, reduce, hidden, n, kernels=(11, 5, 5, 5, 5, 5), in_ch=3):
    total, prev = 0, in_ch
    for c, k in zip(trunk, kernels):
        total += c * prev * k * k + c
        prev = c
    for c in trunk:
        total += (reduce * c + reduce) + (hidden * reduce + hidden) + (n * hidden + n)
    return total


def test_desk_trace():
    trace = M.mldrnet_trace(M.desk_config())
    assert [(r["in"], r["conv"], r["pool"]) for r in trace] == [(64, 29, 14), (14, 14, 7), (7, 7, 3), (3, 3, 1)]
    assert [r["kernel"] for r in trace] == [11, 5, 5, 5]


def test_depth_range_and_underflow():
    with pytest.raises(ValueError, match="depth"):
        M.desk_config(depth=7)
    with pytest.raises(ValueError, match="depth"):
        M.desk_config(depth=1)
    with pytest.raises(M.ShapeError, match="stage 5"):
        M.build(M.desk_config(depth=5))
    # deeper trunks fit once the input is large enough
    assert len(M.build(M.desk_config(depth=6, input_size=136)).branches) == 6


def test_trunk_channels_must_match_depth():
    with pytest.raises(ValueError, match="trunk_channels"):
        M.ModelConfig(depth=3, trunk_channels=(8, 8)).validate()


def test_parameter_count(desk):
    # desk default: [16, 32, 32, 32] trunk, 128-wide reduction and hidden layer, 8 classes
    assert desk.parameter_count() == 154944
    assert desk.parameter_count() == closed_form_param_count((16, 32, 32, 32), 128, 128, 8)
    assert desk.parameter_count() == sum(p.size for p in desk.parameters().values())
    concat = M.build(M.desk_config(fusion="concat"))
    assert concat.parameter_count() == 154944 + 32 * 8 + 8


def test_structure(desk, rng):
    assert len(desk.branches) == desk.config.depth
    branch_logits, fused = desk.forward(images(rng))
    assert len(branch_logits) == 4
    assert all(b.shape == (2, 8) for b in branch_logits)
    assert fused.shape == (2, 8)
    assert desk.concat_head is None
    assert M.build(M.desk_config(fusion="concat")).concat_head is not None


def test_zero_network_is_uniform(rng):
    m = M.build(M.desk_config(fusion="concat"))
    for p in m.parameters().values():
        p[...] = 0.0
    _, fused = m.forward(images(rng))
    assert not fused.any()
    probs = softmax_cross_entropy(fused, [0, 1]).probs
    assert np.allclose(probs, 0.125)


def test_mean_of_identical_heads(rng):
    m = M.build(M.desk_config(seed=4))
    params = m.parameters()
    bias = rng.standard_normal(128)
    for t in range(4):
        params[f"branch.{t}.reduce.weight"][...] = 0.0
        params[f"branch.{t}.reduce.bias"][...] = bias
        for name in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
            params[f"branch.{t}.{name}"][...] = params[f"branch.0.{name}"]
    branch_logits, fused = m.forward(images(rng))
    assert np.abs(branch_logits[0]).max() > 0
    np.testing.assert_allclose(fused, branch_logits[2], rtol=0, atol=1e-12)


def reference_forward(params, x, depth, fusion):
    """The same network written directly against the ndcore kernels."""
    relu = lambda a: ndcore.elementwise("max", a, np.zeros_like(a))  # noqa: E731
    h = (x - 0.5) / 0.25
    outs = []
    for t in range(depth):
        stride = 2 if t == 0 else 1
        h = relu(ndcore.conv2d(h, params[f"trunk.{t}.conv.weight"], params[f"trunk.{t}.conv.bias"], stride, 2))
        h = ndcore.pool2d(h, "max", 2, 2)
        b = relu(ndcore.conv2d(h, params[f"branch.{t}.reduce.weight"], params[f"branch.{t}.reduce.bias"], 1, 0))
        b = ndcore.pool2d(b, "avg", b.shape[2], b.shape[2]).reshape(len(x), -1)
        b = relu(ndcore.matmul(b, params[f"branch.{t}.fc1.weight"]) + params[f"branch.{t}.fc1.bias"])
        outs.append(ndcore.matmul(b, params[f"branch.{t}.fc2.weight"]) + params[f"branch.{t}.fc2.bias"])
    if fusion == "mean":
        return sum(outs) / depth
    if fusion in ("max", "min"):
        fused = outs[0]
        for o in outs[1:]:
            fused = ndcore.elementwise(fusion, fused, o)
        return fused
    cat = np.concatenate(outs, axis=1)
    return ndcore.matmul(cat, params["head.weight"]) + params["head.bias"]


@pytest.mark.parametrize("fusion", FUSION_KINDS)
def test_forward_matches_compositional_oracle(rng, fusion):
    m = M.build(M.desk_config(fusion=fusion, seed=2))
    x = images(rng, 3)
    _, fused = m.forward(x)
    np.testing.assert_allclose(fused, reference_forward(m.parameters(), x, 4, fusion), rtol=0, atol=1e-10)


def test_eval_forward_is_bitwise_deterministic(desk, rng):
    x = images(rng)
    desk.eval()
    a = desk.forward(x)[1]
    b = desk.forward(x)[1]
    assert np.array_equal(a, b)


def test_backward_before_forward():
    with pytest.raises(RuntimeError, match="before forward"):
        M.build(M.desk_config(depth=2)).backward(np.zeros((1, 8)))


def test_zero_upstream_gives_zero_grads(desk, rng):
    desk.zero_grad()
    desk.forward(images(rng))
    desk.backward(np.zeros((2, 8)))
    assert all(not g.any() for _, _, g in desk.named_parameters())


def test_max_fusion_unselected_branches_get_no_gradient(rng):
    m = M.build(M.desk_config(fusion="max", seed=3))
    m.parameters()["branch.2.fc2.bias"][...] = 1e3
    m.zero_grad()
    m.forward(images(rng))
    assert np.all(m.fusion.argselect == 2)
    m.backward(rng.standard_normal((2, 8)))
    grads = {name: g for name, _, g in m.named_parameters()}
    for name, g in grads.items():
        if name.startswith(("branch.0.", "branch.1.", "branch.3.", "trunk.3.")):
            assert not g.any(), name
    assert grads["branch.2.fc2.weight"].any() and grads["trunk.0.conv.weight"].any()


def test_trunk_collects_gradient_from_all_deeper_branches(rng):
    # stage-0 gradient equals the sum of the per-branch contributions
    m = M.build(M.desk_config(fusion="concat", seed=8))
    x = images(rng)
    g = rng.standard_normal((2, 8))
    m.zero_grad()
    m.forward(x)
    m.backward(g)
    full = m.stages[0][0].grads["weight"].copy()
    head_w = m.concat_head.params["weight"]
    parts = np.zeros_like(full)
    for t in range(4):
        mask = np.zeros_like(head_w)
        mask[t * 8:(t + 1) * 8] = head_w[t * 8:(t + 1) * 8]
        saved = head_w.copy()
        m.concat_head.params["weight"][...] = mask
        m.zero_grad()
        m.forward(x)
        m.backward(g)
        parts += m.stages[0][0].grads["weight"]
        m.concat_head.params["weight"][...] = saved
    np.testing.assert_allclose(full, parts, rtol=1e-9, atol=1e-12)


def test_branch_structure_is_depth_independent(rng):
    deep = M.build(M.desk_config(depth=4, seed=5))
    shallow = M.build(M.desk_config(depth=2, seed=6))
    src = deep.parameters()
    for name, p in shallow.parameters().items():
        p[...] = src[name]
    x = images(rng)
    deep_branches, _ = deep.forward(x)
    shallow_branches, _ = shallow.forward(x)
    assert np.array_equal(deep_branches[1], shallow_branches[-1])


def test_mean_fusion_scales_linearly(rng):
    m = M.build(M.desk_config(seed=9))
    x = images(rng, 4)
    _, before = m.forward(x)
    for t in range(4):
        for name in ("weight", "bias"):
            m.parameters()[f"branch.{t}.fc2.{name}"][...] *= 3.5
    _, after = m.forward(x)
    np.testing.assert_allclose(after, 3.5 * before, rtol=1e-12, atol=1e-12)
    assert np.array_equal(after.argmax(axis=1), before.argmax(axis=1))


def test_image_shape_validated(desk):
    with pytest.raises(ValueError, match="expected images"):
        desk.forward(np.zeros((1, 3, 32, 32)))


@pytest.mark.parametrize("fusion", FUSION_KINDS)
def test_full_model_grad_check(rng, fusion):
    m = M.build(M.desk_config(fusion=fusion, seed=11))
    x = images(rng)
    err = grad_check(m, x, labels=[3, 6], epsilon=1e-5, max_per_tensor=4, seed=1)
    assert err < 1e-4


@pytest.mark.parametrize("arch", ["alexnet_like", "acnn", "tcnn"])
def test_baselines(rng, arch):
    m = M.build(M.ModelConfig(arch=arch, seed=2))
    branch_logits, fused = m.forward(images(rng))
    assert fused.shape == (2, 8) and len(branch_logits) == 1
    assert grad_check(m, images(rng), labels=[0, 7], epsilon=1e-5, max_per_tensor=3, seed=2) < 1e-4


def test_tcnn_has_energy_layer():
    m = M.build(M.ModelConfig(arch="tcnn"))
    names = [n for n, _ in m._named_layers]
    assert "energy" in names
    assert sum(n.startswith("conv") for n in names) == 2


def test_acnn_widths():
    m = M.build(M.ModelConfig(arch="acnn", width_divisor=1))
    widths = [p.shape[1] for n, p in m.parameters().items() if n.endswith(".weight") and p.ndim == 2]
    assert widths == [1000, 256, 8]


def test_full_width_preset_shapes():
    cfg = M.full_config()
    trace = M.mldrnet_trace(cfg)
    assert [r["kernel"] for r in trace] == [11, 5, 5, 5]
    assert trace[0]["stride"] == 4 and cfg.input_size == 375 and cfg.reduce_channels == 128


# ---- checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    m = M.build(M.desk_config(fusion="concat", seed=12))
    velocity = {name: rng.standard_normal(p.shape) for name, p in m.parameters().items()}
    m.rng.random(3)
    path = tmp_path / "m.ckpt"
    M.save(m, path, velocity=velocity, epoch=7, meta={"note": "x"})
    ck = M.load(path)
    assert ck.epoch == 7 and ck.meta == {"note": "x"}
    assert ck.model.config == m.config
    for name, p in m.parameters().items():
        assert np.array_equal(ck.model.parameters()[name], p)
        assert np.array_equal(ck.velocity[name], velocity[name])
    assert ck.model.rng.random() == m.rng.random()
    with open(path, "rb") as fh:
        assert fh.read(4) == b"MLDR"


def test_checkpoint_version_error(tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(M.build(M.desk_config(depth=2)), path)
    raw = bytearray(path.read_bytes())
    raw[4] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointVersionError):
        M.load(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(M.build(M.desk_config(depth=2)), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(M.CheckpointTruncatedError):
        M.load(path)


def test_checkpoint_shape_disagreement(tmp_path):
    m = M.build(M.desk_config(depth=2))
    m.config = dataclasses.replace(m.config, branch_hidden=64)
    path = tmp_path / "m.ckpt"
    M.save(m, path)
    with pytest.raises(M.CheckpointShapeError):
        M.load(path)


def test_checkpoint_version_field_is_little_endian(tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(M.build(M.desk_config(depth=2)), path)
    assert struct.unpack("<I", path.read_bytes()[4:8])[0] == M.FORMAT_VERSION
