import numpy as np
import pytest
import torch
from torch import nn

from ssdistill.distiller import (
    FeatureMapSet,
    StageConnector,
    connector_transform,
    distill_loss,
    freeze_teacher,
    parameter_digest,
)
from ssdistill.models import build_backbone


def identity_connector(channels):
    conn = StageConnector(channels, channels, normalize=False)
    with torch.no_grad():
        conn.proj.weight.zero_()
        for c in range(channels):
            conn.proj.weight[c, c, 0, 0] = 1.0
        conn.proj.bias.zero_()
    return conn


def test_identity_connector_passthrough():
    x = torch.randn(2, 3, 4, 4)
    conn = identity_connector(3)
    assert torch.allclose(connector_transform(x, conn), x, atol=1e-6)


def test_zero_connector_gives_zeros():
    conn = StageConnector(3, 5, normalize=False)
    with torch.no_grad():
        conn.proj.weight.zero_()
        conn.proj.bias.zero_()
    out = connector_transform(torch.randn(2, 3, 4, 4), conn)
    assert out.shape == (2, 5, 4, 4)
    assert torch.all(out == 0)


def test_connector_matches_per_position_oracle():
    g = torch.Generator().manual_seed(0)
    conn = StageConnector(3, 5, normalize=False, generator=g, init_std=0.5)
    x = torch.randn(2, 3, 2, 2, generator=g)
    out = connector_transform(x, conn)
    w = conn.proj.weight[:, :, 0, 0]
    b = conn.proj.bias
    for n in range(2):
        for i in range(2):
            for j in range(2):
                want = w @ x[n, :, i, j] + b
                assert torch.allclose(out[n, :, i, j], want, rtol=1e-5, atol=1e-6)


def test_connector_channel_mismatch_raises():
    conn = StageConnector(3, 5, normalize=False)
    with pytest.raises(ValueError):
        connector_transform(torch.randn(2, 4, 2, 2), conn)


def test_feature_map_set_spatial_mismatch_raises():
    with pytest.raises(ValueError):
        FeatureMapSet([(torch.randn(1, 3, 4, 4), torch.randn(1, 3, 2, 2))])


def test_distill_loss_zero_when_matched():
    f_t = torch.randn(2, 3, 4, 4)
    conn = identity_connector(3)
    loss = distill_loss(FeatureMapSet([(f_t, f_t.clone())]), [conn])
    assert loss.item() == pytest.approx(0.0, abs=1e-10)


def test_distill_loss_mean_square_scale():
    # Teacher all zeros, transformed student all ones, 8 elements -> 1.0.
    f_t = torch.zeros(1, 2, 2, 2)
    f_s = torch.zeros(1, 2, 2, 2)
    conn = identity_connector(2)
    with torch.no_grad():
        conn.proj.bias.fill_(1.0)
    loss = distill_loss(FeatureMapSet([(f_t, f_s)]), [conn])
    assert loss.item() == pytest.approx(1.0, rel=1e-6)


def test_distill_loss_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    f_t = torch.from_numpy(rng.standard_normal((2, 4, 3, 3))).float()
    f_s = torch.from_numpy(rng.standard_normal((2, 3, 3, 3))).float()
    g = torch.Generator().manual_seed(2)
    conn = StageConnector(3, 4, normalize=False, generator=g, init_std=0.3)
    got = distill_loss(FeatureMapSet([(f_t, f_s)]), [conn]).item()
    mapped = connector_transform(f_s, conn).detach().numpy().astype(np.float64)
    diff = (f_t.numpy().astype(np.float64) - mapped) ** 2
    assert got == pytest.approx(diff.sum() / diff.size, rel=1e-6)


def test_stage_count_mismatch_raises():
    f = torch.randn(1, 2, 2, 2)
    with pytest.raises(ValueError):
        distill_loss(FeatureMapSet([(f, f)]), [])


def test_identical_extra_stage_leaves_loss_unchanged():
    rng = np.random.default_rng(3)
    f_t = torch.from_numpy(rng.standard_normal((1, 3, 2, 2))).float()
    f_s = torch.from_numpy(rng.standard_normal((1, 3, 2, 2))).float()
    conn = StageConnector(3, 3, normalize=False, init_std=0.2,
                          generator=torch.Generator().manual_seed(4))
    base = distill_loss(FeatureMapSet([(f_t, f_s)]), [conn]).item()
    extra_t = torch.randn(1, 3, 2, 2)
    with_extra = distill_loss(
        FeatureMapSet([(f_t, f_s), (extra_t, extra_t.clone())]),
        [conn, identity_connector(3)],
    ).item()
    assert with_extra == pytest.approx(base, rel=1e-6)


def test_no_gradient_reaches_teacher_features():
    f_t = torch.randn(1, 2, 3, 3, requires_grad=True)
    f_s = torch.randn(1, 2, 3, 3, requires_grad=True)
    conn = identity_connector(2)
    loss = distill_loss(FeatureMapSet([(f_t, f_s)]), [conn])
    loss.backward()
    assert f_t.grad is None
    assert f_s.grad is not None
    assert f_s.grad.abs().sum() > 0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    step = 1e-5
    for _ in range(20):
        f_t64 = torch.from_numpy(rng.standard_normal((1, 2, 2, 2)))
        s0 = rng.standard_normal((1, 3, 2, 2))
        conn = StageConnector(3, 2, normalize=False, init_std=0.3,
                              generator=torch.Generator().manual_seed(6)).double()

        f_s = torch.from_numpy(s0.copy()).requires_grad_(True)
        loss = distill_loss(FeatureMapSet([(f_t64, f_s)]), [conn])
        loss.backward()
        analytic = f_s.grad.numpy()

        def loss_at(arr):
            return distill_loss(
                FeatureMapSet([(f_t64, torch.from_numpy(arr))]), [conn]
            ).item()

        fd = np.zeros_like(s0)
        flat = s0.reshape(-1)
        for idx in range(flat.size):
            hi = flat.copy(); hi[idx] += step
            lo = flat.copy(); lo[idx] -= step
            fd.reshape(-1)[idx] = (loss_at(hi.reshape(s0.shape)) - loss_at(lo.reshape(s0.shape))) / (2 * step)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


def test_freeze_teacher_digest_stable_under_student_updates():
    torch.manual_seed(0)
    teacher = freeze_teacher(build_backbone("tiny"))
    student = build_backbone("tiny")
    digest_before = parameter_digest(teacher)
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        teacher_out_before = teacher(x)
    opt = torch.optim.SGD(student.parameters(), lr=0.1)
    for _ in range(10):
        loss = student(torch.randn(2, 3, 16, 16)).pow(2).mean()
        opt.zero_grad(); loss.backward(); opt.step()
    assert parameter_digest(teacher) == digest_before
    with torch.no_grad():
        assert torch.equal(teacher(x), teacher_out_before)
    assert all(not p.requires_grad for p in teacher.parameters())
    assert not any(p is tp for p in opt.param_groups[0]["params"]
                   for tp in teacher.parameters())


def test_connector_parameters_are_trainable():
    conn = StageConnector(3, 3)
    assert all(p.requires_grad for p in conn.parameters())
    assert isinstance(conn.norm, nn.BatchNorm2d)
