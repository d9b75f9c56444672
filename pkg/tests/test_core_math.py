"""Tests for primitive ops, gradients and the container format."""
import struct

import numpy as np
import pytest
import torch

from anchorvid import core_math
from anchorvid.backbone import DiTModel
from anchorvid.core_math import ParamStore, op_set
from anchorvid.errors import ContainerFormatError, GradientError, NonFiniteError, ShapeError
from anchorvid.flow_match import fm_loss, interpolate, velocity_target
from anchorvid.rope3d import RopeConfig

from conftest import assert_close, random_video, randomize, tiny_model_config


class TestOpSet:
    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            op_set(torch.zeros(2, 3), torch.zeros(4, 2), "matmul")

    def test_matmul_values(self):
        a = torch.arange(6.0).reshape(2, 3)
        b = torch.arange(6.0).reshape(3, 2)
        assert_close(op_set(a, b, "matmul"), a @ b)

    def test_add_broadcasts(self):
        out = op_set(torch.ones(2, 3), torch.tensor([1.0, 2.0, 3.0]), "add")
        assert_close(out, torch.tensor([[2.0, 3.0, 4.0], [2.0, 3.0, 4.0]]))

    def test_add_incompatible(self):
        with pytest.raises(ShapeError):
            op_set(torch.ones(2, 3), torch.ones(4), "add")

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(ShapeError):
            op_set(torch.zeros(2, 3), torch.zeros(2, 4), "concat", dim=0)

    def test_slice_bounds(self):
        x = torch.arange(10.0)
        assert_close(op_set(x, None, "slice", start=2, stop=5), torch.tensor([2.0, 3.0, 4.0]))
        with pytest.raises(ShapeError):
            op_set(x, None, "slice", start=4, stop=11)

    def test_reshape_size(self):
        with pytest.raises(ShapeError):
            op_set(torch.zeros(2, 3), None, "reshape", shape=(4, 2))

    def test_softmax_rows_sum_to_one(self):
        out = op_set(torch.randn(3, 5, dtype=torch.float64), None, "softmax_lastdim")
        assert_close(out.sum(dim=-1), torch.ones(3, dtype=torch.float64))

    def test_non_finite_output(self):
        with pytest.raises(NonFiniteError):
            op_set(torch.tensor([float("inf")]), torch.tensor([0.0]), "mul")

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            op_set(torch.zeros(1), None, "conv")

    def test_mse_matches_definition(self):
        a = torch.tensor([1.0, 2.0, 3.0])
        b = torch.tensor([1.0, 0.0, 0.0])
        assert float(op_set(a, b, "mse")) == pytest.approx(13.0 / 3.0)


class TestGrad:
    def test_non_scalar_loss(self):
        w = torch.ones(3, requires_grad=True)
        with pytest.raises(GradientError):
            core_math.grad(w * 2, ParamStore({"w": w}))

    def test_detached_parameter(self):
        w = torch.ones(3)
        with pytest.raises(GradientError):
            core_math.grad(w.sum(), ParamStore({"w": w}))

    def test_unused_parameter_gets_zero(self):
        a = torch.ones(2, requires_grad=True)
        b = torch.ones(3, requires_grad=True)
        store = ParamStore({"a": a, "b": b})
        grads = core_math.grad((a * 3.0).sum(), store)
        assert_close(grads["a"], torch.full((2,), 3.0))
        assert_close(grads["b"], torch.zeros(3))

    def test_constant_loss(self):
        w = torch.ones(2, requires_grad=True)
        grads = core_math.grad(torch.tensor(1.0), ParamStore({"w": w}))
        assert_close(grads["w"], torch.zeros(2))

    def test_layer_norm_gelu_chain_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        w = torch.randn(6, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        g = torch.randn(6, generator=gen, dtype=torch.float64, requires_grad=True)
        store = ParamStore({"w": w, "g": g})

        def loss_fn(params):
            h = op_set(x, params["g"], "layer_norm")
            h = op_set(op_set(h, params["w"], "matmul"), None, "gelu")
            return op_set(h, torch.zeros_like(h), "mse")

        analytic = core_math.grad(loss_fn(store), store)
        numeric = core_math.finite_diff_grad(loss_fn, store)
        for name in store:
            assert core_math.relative_error(analytic[name], numeric[name]) < 1e-6

    def test_finite_difference_rejects_bad_step(self):
        w = torch.ones(2, requires_grad=True)
        with pytest.raises(GradientError):
            core_math.finite_diff_grad(lambda p: p["w"].sum(), ParamStore({"w": w}), eps=0.0)


def op_case(kind, seed):
    """Seeded operands, options and a fixed readout weight for one op kind."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    m, n, p = (int(v) for v in rng.integers(2, 5, size=3))

    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    b, options = None, {}
    if kind == "matmul":
        a, b = (rand(2, m, n), rand(n, p)) if seed % 2 else (rand(m, n), rand(n, p))
    elif kind in ("add", "mul"):
        a = rand(m, n)
        b = rand(*[(m, n), (1, n), (n,)][seed % 3])
    elif kind == "concat":
        dim = seed % 2
        a = rand(m, n)
        b = rand(p, n) if dim == 0 else rand(m, p)
        options = {"dim": dim}
    elif kind == "slice":
        a = rand(m, n)
        dim = seed % 2
        start = int(rng.integers(0, a.shape[dim]))
        options = {"dim": dim, "start": start, "stop": int(rng.integers(start + 1, a.shape[dim] + 1))}
    elif kind == "reshape":
        a = rand(m, n)
        options = {"shape": [(n, m), (m * n,), (1, m, n)][seed % 3]}
    elif kind == "transpose":
        a = rand(m, n, p)
        options = {"dims": [(-2, -1), (0, 2)][seed % 2]}
    elif kind == "layer_norm":
        a, b = rand(m, n + 2), rand(n + 2)
    elif kind == "mse":
        a, b = rand(m, n), rand(m, n)
    else:
        a = rand(m, n)
    return a, b, options


@pytest.mark.parametrize("kind", core_math.OP_KINDS)
def test_every_op_kind_matches_central_differences(kind):
    worst = 0.0
    for seed in range(20):
        a, b, options = op_case(kind, seed)
        params = {"a": a.clone().requires_grad_(True)}
        if b is not None:
            params["b"] = b.clone().requires_grad_(True)
        store = ParamStore(params)
        out_shape = op_set(a, b, kind, **options).shape
        readout = torch.randn(out_shape, generator=torch.Generator().manual_seed(100 + seed), dtype=torch.float64)

        def loss_fn(ps):
            return (op_set(ps["a"], ps["b"] if "b" in ps else None, kind, **options) * readout).sum()

        analytic = core_math.grad(loss_fn(store), store)
        numeric = core_math.finite_diff_grad(loss_fn, store, eps=1e-6)
        for name in store:
            worst = max(worst, core_math.relative_error(analytic[name], numeric[name]))
    assert worst < 1e-6


class TestFullLossGradient:
    """Analytic gradients of the flow-matching loss with anchors, audio and prefix."""

    def test_small_model_matches_central_differences(self, small_conditions):
        torch.manual_seed(0)
        model = randomize(DiTModel(tiny_model_config(), RopeConfig(head_dim=8)).double(), seed=3)
        store = ParamStore.from_module(model)
        assert store.num_parameters() <= 10_000

        x1 = random_video(2, seed=20)
        x0 = random_video(2, seed=21)
        prefix = random_video(4, seed=22)
        t = 0.37

        def loss_fn(params):
            x_t = interpolate(x0, x1, t)
            pred = model(x_t, t, small_conditions, prefix=prefix)
            return fm_loss(pred, velocity_target(x0, x1))

        analytic = core_math.grad(loss_fn(store), store)
        coords = core_math.sample_coordinates(store, per_param=3, seed=1)
        numeric = core_math.finite_diff_grad(loss_fn, store, eps=1e-5, coords=coords)

        a = torch.cat([analytic[n].reshape(-1)[coords[n]] for n in store])
        b = torch.cat([numeric[n] for n in store])
        assert float(a.norm()) > 0.0
        assert core_math.relative_error(a, b) < 1e-4


class TestContainer:
    def test_checkpoint_round_trip_with_meta(self, tmp_path):
        path = str(tmp_path / "x.avck")
        tensors = {"param/a": torch.arange(6.0).reshape(2, 3), "param/b": torch.ones(1)}
        core_math.save_checkpoint(path, tensors, {"step": 7, "stage": "II"})
        loaded, meta = core_math.load_checkpoint(path)
        assert meta == {"step": 7, "stage": "II"}
        assert_close(loaded["param/a"], tensors["param/a"])

    def test_header_layout(self, tmp_path):
        path = str(tmp_path / "x.avck")
        core_math.save_checkpoint(path, {"w": torch.zeros(2, 5)})
        raw = open(path, "rb").read()
        assert raw[:4] == b"AVCK"
        version, meta_len = struct.unpack("<II", raw[4:12])
        assert version == core_math.CHECKPOINT_VERSION
        assert raw[12:12 + meta_len] == b"{}"

    def test_wrong_magic(self, tmp_path):
        path = str(tmp_path / "x.avlt")
        core_math.write_container(path, {"w": torch.zeros(1)}, magic=b"AVLT")
        with pytest.raises(ContainerFormatError):
            core_math.load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.avck"
        core_math.save_checkpoint(str(path), {"w": torch.zeros(4, 4)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ContainerFormatError):
            core_math.load_checkpoint(str(path))

    def test_training_state_restores_parameters_and_moments(self, tiny_model, small_conditions):
        optimizer = core_math.build_optimizer(tiny_model.parameters(), lr=1e-3)
        x = random_video(2, seed=1)
        loss = fm_loss(tiny_model(x, 0.5, small_conditions), x)
        loss.backward()
        optimizer.step()

        state = core_math.training_state(tiny_model, optimizer)
        assert any(k.startswith("optim/exp_avg/") for k in state)

        fresh = randomize(DiTModel(tiny_model_config(), RopeConfig(head_dim=8)).double(), seed=9)
        fresh_opt = core_math.build_optimizer(fresh.parameters(), lr=1e-3)
        core_math.restore_training_state(fresh, state, fresh_opt, step=1)
        for p, q in zip(tiny_model.parameters(), fresh.parameters()):
            assert_close(q, p.detach(), rtol=1e-6, atol=1e-6)
        assert len(fresh_opt.state) == len(list(fresh.parameters()))

    def test_restore_rejects_shape_mismatch(self, tiny_model):
        state = core_math.training_state(tiny_model)
        other = DiTModel(tiny_model_config(model_dim=16, heads=2), RopeConfig(head_dim=8))
        with pytest.raises(ContainerFormatError):
            core_math.restore_training_state(other, state)


def test_relative_error_is_norm_wise():
    a = torch.tensor([1.0, 0.0])
    b = torch.tensor([1.0, 1e-3])
    assert core_math.relative_error(a, b) == pytest.approx(1e-3, rel=1e-6)


def test_optimizer_defaults():
    opt = core_math.build_optimizer([torch.zeros(1, requires_grad=True)])
    group = opt.param_groups[0]
    assert isinstance(opt, torch.optim.AdamW)
    assert group["lr"] == 1e-5
    assert tuple(group["betas"]) == (0.9, 0.95)
    assert group["weight_decay"] == 0.1
