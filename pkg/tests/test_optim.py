import numpy as np
import pytest
import torch

from splatsim.gaussians import (CLASS_OTHER, CLASS_ROAD, CLASS_SKY,
                                GaussianCloud)
from splatsim.optim import (Adam, DensifyConfig, DensifyState,
                            ParamGroupConfig, cloud_optimizer,
                            densify_and_prune, exp_lr)

from conftest import make_cloud


def scalar_adam(lr):
    p = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    opt = Adam({"x": p}, {"x": ParamGroupConfig(lr=lr)})
    return p, opt


class TestAdam:
    def test_zero_grad_no_change(self):
        p, opt = scalar_adam(0.1)
        p.grad = torch.zeros_like(p)
        before = p.detach().clone()
        opt.step()
        assert torch.equal(p.detach(), before)
        assert opt.state["x"]["t"] == 1

    def test_first_step_magnitude(self):
        p, opt = scalar_adam(0.1)
        p.grad = torch.tensor([3.7], dtype=torch.float64)
        opt.step()
        # Warm-start property: |first step| ~ lr regardless of grad scale.
        assert abs(float(p.detach())) == pytest.approx(0.1, rel=1e-6)

    def test_quadratic_convergence(self):
        # Oracle: minimize (x - 2)^2 / 2; must reach the minimum.
        p = torch.tensor([10.0], dtype=torch.float64, requires_grad=True)
        opt = Adam({"x": p}, {"x": ParamGroupConfig(lr=0.1)})
        for _ in range(500):
            opt.zero_grad()
            loss = 0.5 * (p - 2.0) ** 2
            loss.backward()
            opt.step()
        assert abs(float(p.detach()) - 2.0) < 1e-4

    def test_frozen_group(self):
        p = torch.tensor([1.0, 2.0], dtype=torch.float64)
        opt = Adam({"x": p}, {"x": ParamGroupConfig(lr=0.1, frozen=True)})
        p.grad = torch.ones_like(p)
        before = p.detach().clone()
        for _ in range(5):
            opt.step()
        assert torch.equal(p.detach(), before)
        assert float(opt.state["x"]["m"].abs().max()) == 0.0

    def test_frozen_rows_bitwise(self):
        p = torch.rand(6, 3, dtype=torch.float64, requires_grad=True)
        rows = torch.tensor([True, False, True, False, False, True])
        opt = Adam({"x": p}, {"x": ParamGroupConfig(lr=0.1)}, {"x": rows})
        before = p.detach().clone()
        for _ in range(10):
            opt.zero_grad()
            (p ** 2).sum().backward()
            opt.step()
        assert torch.equal(p.detach()[rows], before[rows])
        assert not torch.equal(p.detach()[~rows], before[~rows])


def test_exp_lr():
    assert exp_lr(1.0, 0, 100) == pytest.approx(1.0)
    assert exp_lr(1.0, 100, 100) == pytest.approx(0.01)
    assert exp_lr(1.0, 50, 100) == pytest.approx(0.1)


def five_gaussian_fixture():
    """Rule-table fixture: per-row (class, opacity, grad, scale) combinations."""
    n = 5
    cloud = GaussianCloud(
        mu=torch.arange(n * 3, dtype=torch.float64).reshape(n, 3),
        rot=torch.tensor([[1.0, 0, 0, 0]] * n, dtype=torch.float64),
        log_scale=torch.log(torch.tensor(
            [[0.1] * 3, [0.1] * 3, [1.0] * 3, [0.1] * 3, [0.1] * 3],
            dtype=torch.float64)),
        # rows: survivor, clone, split, pruned, frozen road
        opacity_logit=torch.logit(torch.tensor(
            [0.5, 0.5, 0.5, 0.001, 0.5], dtype=torch.float64)),
        sh=torch.zeros(n, 9, 3, dtype=torch.float64),
        class_tag=torch.tensor([CLASS_OTHER, CLASS_OTHER, CLASS_OTHER,
                                CLASS_OTHER, CLASS_ROAD], dtype=torch.int8))
    grads = torch.tensor([0.0005, 0.002, 0.002, 0.0, 0.01])
    return cloud, grads


class TestDensify:
    def cfg(self):
        return DensifyConfig(grad_threshold=0.001, split_scale_threshold=0.5,
                             prune_opacity=0.005)

    def run(self, cloud, grads, cfg=None):
        opt = cloud_optimizer(cloud)
        return densify_and_prune(cloud, opt, grads, cfg or self.cfg(),
                                 initial_count=cloud.count), opt

    def test_rule_table(self):
        cloud, grads = five_gaussian_fixture()
        new, opt = self.run(cloud, grads)
        # 5 - 1 pruned - 1 split parent + 1 clone + 2 children = 6
        assert new.count == 6
        # Row below threshold survives untouched; road row untouched.
        assert torch.equal(new.mu[0], cloud.mu[0])
        # Clone duplicates at the same position.
        clones = (new.mu == cloud.mu[1]).all(dim=-1).sum()
        assert clones == 2
        # Pruned row gone.
        assert not (new.opacity_logit == cloud.opacity_logit[3]).any()
        # Split children have scale / 1.6.
        child_scales = torch.exp(new.log_scale).max(dim=-1).values
        assert (child_scales - 1.0 / 1.6).abs().min() < 1e-9

    def test_all_below_threshold(self):
        cloud, grads = five_gaussian_fixture()
        new, _ = self.run(cloud, torch.zeros(5))
        assert new.count == 4  # only the pruned row is removed

    def test_road_sky_never_touched(self):
        cloud, grads = five_gaussian_fixture()
        new, _ = self.run(cloud, torch.full((5,), 0.1))
        road_rows = new.mu[new.class_tag == CLASS_ROAD]
        assert torch.equal(road_rows, cloud.mu[cloud.class_tag == CLASS_ROAD])

    def test_invariants_after_densify(self):
        cloud, grads = five_gaussian_fixture()
        new, opt = self.run(cloud, grads)
        new.validate()
        for name in ("mu", "rot", "log_scale", "opacity_logit", "sh"):
            assert opt.params[name].shape[0] == new.count
            assert opt.state[name]["m"].shape == opt.params[name].shape

    def test_growth_cap(self):
        cloud, grads = five_gaussian_fixture()
        cfg = DensifyConfig(grad_threshold=0.001, growth_cap=1.0)
        new, _ = self.run(cloud, torch.full((5,), 0.1), cfg)
        assert new.count <= 5

    def test_class_tags_preserved_on_copies(self):
        cloud, grads = five_gaussian_fixture()
        new, _ = self.run(cloud, grads)
        assert set(new.class_tag.tolist()) == {CLASS_OTHER, CLASS_ROAD}


def test_densify_state_accumulation():
    st = DensifyState(4)
    st.record(torch.tensor([0, 2]), torch.tensor([[3.0, 4.0], [1.0, 0.0]]))
    st.record(torch.tensor([0]), torch.tensor([[0.0, 1.0]]))
    means = st.mean_grads()
    assert float(means[0]) == pytest.approx(3.0)
    assert float(means[2]) == pytest.approx(1.0)
    assert float(means[1]) == 0.0
