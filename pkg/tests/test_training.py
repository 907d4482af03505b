import math
import types

import numpy as np
import pytest
import torch

from facthash.scenedata import build_dataset, desk_scene, orbit_cameras
from facthash.training import (
    ModelConfig,
    NonFiniteLossError,
    RayBank,
    TrainConfig,
    compute_losses,
    cosine_factor,
    finite_difference_audit,
    init_state,
    make_optimizer,
    march_step,
    pipeline_audit,
    train,
    train_step,
)

import oracles

TINY_MODEL = ModelConfig(levels=4, n_min=4, n_max=16, table_size=2**10, density_hidden=32, color_hidden=32)


def tiny_train(**kw):
    base = dict(batch_rays=256, iterations=20, step_divisor=64.0, bitfield_resolution=16,
                bitfield_warmup=8, bitfield_every=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    scene = desk_scene()
    step = march_step(scene.aabb, 64.0) / 4
    train_ds = build_dataset(scene, orbit_cameras(4, 3.0, 0.69, 24, 24), "train", step, 0.69)
    test_ds = build_dataset(scene, orbit_cameras(2, 3.0, 0.69, 24, 24, phase=1.0), "test", step, 0.69)
    return train_ds, test_ds


def _batch(ds, n=512, seed=0):
    bank = RayBank.from_dataset(ds)
    idx = torch.randint(len(bank), (n,), generator=torch.Generator().manual_seed(seed))
    return bank.origins[idx], bank.dirs[idx], bank.rgb[idx]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_rays=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)


def test_cosine_schedule_endpoints():
    assert cosine_factor(0, 100) == 1.0
    assert cosine_factor(50, 100) == pytest.approx(0.5)
    assert cosine_factor(100, 100) == pytest.approx(0.0, abs=1e-15)


def test_optimizer_groups_and_hyperparameters():
    state = init_state(TINY_MODEL, tiny_train(), np.array([[-1.0, -1, -1], [1, 1, 1]]))
    groups = state.optimizer.param_groups
    assert [g["lr"] for g in groups] == [1e-2, 1e-3]
    assert all(g["betas"] == (0.9, 0.99) and g["eps"] == 1e-15 for g in groups)
    n_opt = sum(p.numel() for g in groups for p in g["params"])
    assert n_opt == sum(p.numel() for p in state.field.parameters())


def test_zero_learning_rate_leaves_parameters(tiny_data):
    state = init_state(TINY_MODEL, tiny_train(lr_tables=0.0, lr_mlp=0.0), tiny_data[0].aabb)
    before = [p.detach().clone() for p in state.field.parameters()]
    train_step(state, *_batch(tiny_data[0]))
    for a, b in zip(before, state.field.parameters()):
        assert torch.equal(a, b)


def test_adam_matches_hand_stepped_reference():
    theta = torch.nn.Parameter(torch.tensor([0.3], dtype=torch.float64))
    enc = torch.nn.Module()
    enc.theta = theta
    toy = types.SimpleNamespace(encoder=enc, mlp=torch.nn.Module())
    cfg = TrainConfig(lr_tables=0.05)
    opt = make_optimizer(toy, cfg)

    def grad(t):
        return 2.0 * (t - 2.0) + 3.0 * t * t

    traj = []
    for _ in range(5):
        opt.zero_grad()
        t = theta[0]
        ((t - 2.0) ** 2 + t**3).backward()
        opt.step()
        traj.append(float(theta[0]))
    ref = oracles.adam_trajectory(0.3, grad, 0.05, 0.9, 0.99, 1e-15, 5)
    np.testing.assert_allclose(traj, ref, rtol=1e-14)


def test_linear_toy_audit_exact():
    w = torch.randn(50, dtype=torch.float64, generator=torch.Generator().manual_seed(0)).requires_grad_()
    c = torch.linspace(-2, 3, 50, dtype=torch.float64)
    rep = finite_difference_audit(lambda: (c * w).sum(), [w], 20, eps=1e-3,
                                  generator=torch.Generator().manual_seed(1))
    assert rep["max_rel_error"] < 1e-10


def test_audit_flags_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x g

    w = torch.full((4,), 3.0, dtype=torch.float64, requires_grad=True)
    rep = finite_difference_audit(lambda: Wrong.apply(w).sum(), [w], 4)
    assert rep["max_rel_error"] > 0.5


@pytest.mark.parametrize("seed", range(4))
def test_pipeline_audit_float64(seed):
    rep = pipeline_audit(seed, "float64", n_params=20)
    assert rep["max_rel_error"] < 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_pipeline_audit_float32(seed):
    rep = pipeline_audit(seed, "float32", n_params=20)
    assert rep["max_rel_error"] < 1e-3


def test_gradient_census_dense_batch(tiny_data):
    """Every parameter tensor, and every table slot, gets gradient on a batch covering the images."""
    state = init_state(TINY_MODEL, tiny_train(), tiny_data[0].aabb)
    state.bitfield.set_all(True)
    bank = RayBank.from_dataset(tiny_data[0])
    total, _, _ = compute_losses(state, bank.origins, bank.dirs, bank.rgb)
    total.backward()
    for name, p in state.field.named_parameters():
        assert p.grad is not None and bool((p.grad != 0).any()), name
    enc = state.field.encoder
    grad = enc.tables.data.grad
    for key, (off, n) in enc.tables.slots.items():
        assert bool((grad[off : off + n] != 0).any()), key
    # hidden units: no unit is silently dead across the whole batch
    for m in list(state.field.mlp.density) + list(state.field.mlp.color):
        rows_alive = (m.weight.grad != 0).any(dim=1).float().mean()
        assert float(rows_alive) > 0.9


def test_non_finite_loss_aborts(tiny_data):
    state = init_state(TINY_MODEL, tiny_train(), tiny_data[0].aabb)
    state.bitfield.set_all(True)  # as warmup would; an empty bitfield evaluates nothing
    with torch.no_grad():
        state.field.mlp.color[-1].bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="non-finite"):
        train_step(state, *_batch(tiny_data[0], 64))


def test_zero_iterations_equals_initialization(tiny_data):
    cfg = tiny_train(iterations=0)
    res = train(TINY_MODEL, cfg, tiny_data[0])
    fresh = init_state(TINY_MODEL, cfg, tiny_data[0].aabb)
    assert res.records == []
    for a, b in zip(res.state.field.state_dict().values(), fresh.field.state_dict().values()):
        assert torch.equal(a, b)


def test_training_is_deterministic(tiny_data, tmp_path):
    cfg = tiny_train(iterations=15)
    a = train(TINY_MODEL, cfg, tiny_data[0], log_path=str(tmp_path / "a.ndjson"))
    b = train(TINY_MODEL, cfg, tiny_data[0], log_path=str(tmp_path / "b.ndjson"))
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()
    assert len(a.records) == 15
    for x, y in zip(a.state.field.parameters(), b.state.field.parameters()):
        assert torch.equal(x, y)


def test_smoke_run_loss_decreases(tiny_data):
    res = train(TINY_MODEL, tiny_train(iterations=200), tiny_data[0], tiny_data[1])
    loss = np.array([r["loss"] for r in res.records])
    assert np.isfinite(loss).all()
    smooth = np.convolve(loss, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
    assert res.records[-1]["test_psnr"] == res.test_psnr
    assert res.test_psnr > 12.0
