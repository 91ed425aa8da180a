import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualgrasp import diffusion as df
from dualgrasp import geometry as geo
from dualgrasp import gripper as gr
from dualgrasp import model as md
from dualgrasp import objects as ob

SMALL = md.ModelConfig(grid=8, channels=4, point_hidden=16, hidden=32, sdf_hidden=16, time_dim=8, steps=20, seed=5)


def small_model(seed=5):
    return md.GraspScorer(gr.default_gripper().query_points, md.ModelConfig(**{**SMALL.__dict__, "seed": seed}))


def test_schedule_endpoints_and_monotone():
    s = df.make_schedule()
    assert s.T == 250 and s.t_c == 50
    assert s.sigma[0] == 0.005 and s.sigma[-1] == 0.5
    assert np.all(np.diff(s.sigma) > 0)
    np.testing.assert_allclose(s.eta, 0.25 * s.sigma)
    # geometric spacing
    np.testing.assert_allclose(np.diff(np.log(s.sigma)), math.log(100) / 249, rtol=1e-9)


@pytest.mark.parametrize("kwargs", [{"T": 1}, {"sigma_min": 0.0}, {"sigma_min": 0.6}, {"t_c": 251},
                                    {"t_c": -1}, {"eta_coeff": -0.1}])
def test_schedule_rejects_bad_parameters(kwargs):
    with pytest.raises(df.InvalidSchedule):
        df.make_schedule(**kwargs)


def test_collision_gate_counts_remaining_steps():
    s = df.make_schedule(T=10, t_c=3)
    active = [t for t in range(10) if s.collision_active(t)]
    assert active == [0, 1, 2]
    assert not df.make_schedule(T=10, t_c=0).collision_active(0)


def test_perturb_log_consistency_and_std():
    s = df.make_schedule()
    rng = np.random.default_rng(0)
    h = np.tile(np.eye(4), (4000, 2, 1, 1))
    noisy, eps = df.perturb(h, 62, s, rng)
    np.testing.assert_allclose(geo.logmap2(noisy), eps, atol=1e-10)
    np.testing.assert_allclose(eps.std(axis=0), s.sigma[62], rtol=0.06)
    # per-sample noise levels
    t = np.array([0, 249, 0, 249])
    _, eps = df.perturb(h[:4], t, s, np.random.default_rng(1))
    assert eps.shape == (4, 12)


def test_diffusion_loss_fixture():
    pred = torch.tensor([[1.0] * 12, [0.0] * 12], dtype=torch.float64)
    eps = torch.tensor([[0.5] * 12, [-0.2] * 12], dtype=torch.float64)
    sigma = torch.tensor([0.5, 0.1], dtype=torch.float64)
    # |1 - 1| * 12 = 0 and |0 + 2| * 12 = 24
    assert df.diffusion_loss(pred, eps, sigma).item() == pytest.approx(12.0)


def test_bce_values_and_gradient_sign():
    p = torch.tensor([0.5, 0.5, 1.0, 0.0], dtype=torch.float64, requires_grad=True)
    y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    loss = df.bce(p, y)
    np.testing.assert_allclose(loss[:2].detach().numpy(), math.log(2))
    assert torch.all(torch.isfinite(loss)) and loss[2:].max() < 1e-6
    loss[:2].sum().backward()
    assert p.grad[0] < 0 < p.grad[1]


class FakeModel:
    """pose_gradient stand-in with a fixed gradient per objective."""

    def __init__(self, grads):
        self.grads = grads

    def pose_gradient(self, h, tp, t, objective, create_graph=False):
        return torch.as_tensor(np.tile(self.grads[objective], (len(h), 1)), dtype=torch.float64)


def unit(i, scale=1.0):
    v = np.zeros(12)
    v[i] = scale
    return v


def test_guided_score_terms_gating_and_clipping():
    s = df.make_schedule(T=10, t_c=3)
    fake = FakeModel({"energy": unit(0, -2.0), "log_fc": unit(1, 5.0), "log_free": unit(2, 0.5)})
    h = np.tile(np.eye(4), (3, 2, 1, 1))
    cfg = df.GuidanceConfig(fc_weight=2.0, col_weight=3.0, clip=1.0)
    early = df.guided_score(fake, None, h, 9, s, cfg).numpy()
    np.testing.assert_allclose(early, np.tile(unit(0, 2.0) + unit(1, 2.0), (3, 1)))
    late = df.guided_score(fake, None, h, 2, s, cfg).numpy()
    np.testing.assert_allclose(late, np.tile(unit(0, 2.0) + unit(1, 2.0) + unit(2, 1.5), (3, 1)))
    off = df.guided_score(fake, None, h, 0, s, df.GuidanceConfig(fc_weight=0.0, col_weight=0.0)).numpy()
    np.testing.assert_allclose(off, np.tile(unit(0, 2.0), (3, 1)))


def test_constant_fc_classifier_adds_nothing():
    m = small_model()
    with torch.no_grad():
        for p in m.fc_head.parameters():
            p.zero_()
    cloud = ob.sample_surface(ob.box(0.2, 0.1, 0.05), 300, seed=0)
    tp = m.encode(cloud)
    s = df.make_schedule(T=20, t_c=5)
    h = np.tile(np.eye(4), (2, 2, 1, 1))
    h[:, 1, :3, 3] = [0.05, 0.0, 0.0]
    a = df.guided_score(m, tp, h, 10, s, df.GuidanceConfig(col_weight=0.0)).numpy()
    b = df.guided_score(m, tp, h, 10, s, df.GuidanceConfig(fc_weight=0.0, col_weight=0.0)).numpy()
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_reverse_step_noiseless_and_clipped():
    s = df.make_schedule(T=10, t_c=3)
    h = np.tile(np.eye(4), (1, 2, 1, 1))
    score = unit(0, 4.0)[None]
    out = df.reverse_step(h, score, 5, s, None)
    np.testing.assert_allclose(geo.logmap2(out)[0], 0.5 * s.eta[5] ** 2 * score[0], atol=1e-14)
    big = unit(0, 1e9)[None]
    clipped = df.reverse_step(h, big, 5, s, None, drift_clip=0.25)
    np.testing.assert_allclose(np.linalg.norm(geo.logmap2(clipped)[0, :6]), 0.25, atol=1e-12)
    zero_eta = df.NoiseSchedule(10, s.sigma, np.zeros(10), 3)
    np.testing.assert_array_equal(df.reverse_step(h, big, 5, zero_eta, np.ones((1, 12))), h)


def test_chain_streams_independent_of_batch_size():
    a = [r.standard_normal(3) for r in df.chain_rngs(4, 3)]
    b = [r.standard_normal(3) for r in df.chain_rngs(4, 8)][:3]
    np.testing.assert_array_equal(np.array(a), np.array(b))


def test_langevin_drives_to_analytic_minimum():
    tau = 0.05
    s = df.make_schedule(T=250)

    def score_fn(h, t):
        return -geo.logmap2(h) / tau**2

    rng = np.random.default_rng(0)
    h0 = np.tile(np.eye(4), (16, 2, 1, 1))
    h0[..., :3, :3] = geo.random_rotations(rng, 32).reshape(16, 2, 3, 3)
    h0[..., :3, 3] = rng.uniform(-0.3, 0.3, size=(16, 2, 3))
    h = df.langevin(h0, score_fn, s, df.chain_rngs(0, 16), drift_clip=0.25)
    assert np.linalg.norm(geo.logmap2(h), axis=-1).mean() < 3 * s.sigma[0]


def test_sample_is_deterministic_and_sorted():
    m = small_model()
    cloud = ob.sample_surface(ob.box(0.2, 0.1, 0.05), 300, seed=0)
    s = df.make_schedule(T=20, t_c=5)
    a, dropped = df.sample(m, cloud, 6, s, df.GuidanceConfig(), seed=3)
    b, _ = df.sample(m, cloud, 6, s, df.GuidanceConfig(), seed=3)
    assert dropped == 0 and len(a) == 6
    assert [x.to_json() for x in a] == [x.to_json() for x in b]
    energies = [x.energy for x in a]
    assert energies == sorted(energies)
    c, _ = df.sample(m, cloud, 6, s, df.GuidanceConfig(), seed=4)
    assert [x.to_json() for x in a] != [x.to_json() for x in c]


def test_half_turn_roll_maps_jaw_points_onto_themselves():
    q = gr.default_gripper().query_points
    rolled = q @ df.ROLL_PI[:3, :3].T
    d = np.linalg.norm(rolled[:, None] - q[None], axis=-1)
    assert d.min(axis=1).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_keeps_pairs_and_labels_together(seed):
    rng = np.random.default_rng(seed)
    h = np.tile(np.eye(4), (5, 2, 1, 1))
    h[:, 0, 0, 3] = np.arange(5)
    h[:, 1, 0, 3] = -np.arange(5) - 1
    y = np.stack([np.arange(5) % 2, 1 - np.arange(5) % 2], axis=1).astype(float)
    h2, y2 = df.augment(h, y, rng)
    for i in range(5):
        swapped = h2[i, 0, 0, 3] < 0
        assert y2[i, 0] == y[i, int(swapped)] and y2[i, 1] == y[i, 1 - int(swapped)]
        # positions untouched by the roll, which only acts on the orientation
        assert {h2[i, 0, 0, 3], h2[i, 1, 0, 3]} == {h[i, 0, 0, 3], h[i, 1, 0, 3]}


def tiny_objects():
    mesh = ob.box(0.2, 0.06, 0.04)
    cloud = ob.sample_surface(mesh, 300, seed=0)
    rng = np.random.default_rng(0)
    n = 12
    h = np.tile(np.eye(4), (n, 2, 1, 1))
    h[..., :3, :3] = geo.random_rotations(rng, 2 * n).reshape(n, 2, 3, 3)
    h[..., :3, 3] = rng.uniform(-0.1, 0.1, size=(n, 2, 3))
    return [df.TrainObject("box", cloud, mesh, h, rng.integers(0, 2, n).astype(float),
                           rng.integers(0, 2, (n, 2)).astype(float), np.arange(n) < 8)]


def test_stage_two_touches_only_collision_head():
    m = small_model()
    objs = tiny_objects()
    s = df.make_schedule(T=20, t_c=5)
    cfg = df.TrainConfig(batch=4, max_epochs_stage1=1, epochs_stage2=2, val_fraction=0.25)
    trainer = df.Trainer(m, objs, s, cfg)
    trainer.stage1()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    trainer.fit_head("col", 2, 2)
    after = m.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed and all(k.startswith("col_head") for k in changed)
    stages = {row["stage"] for row in trainer.history.rows}
    assert stages == {1, 2}


def test_training_is_deterministic():
    s = df.make_schedule(T=20, t_c=5)
    cfg = df.TrainConfig(batch=4, max_epochs_stage1=2, epochs_stage2=1, val_fraction=0.25)
    states = []
    for _ in range(2):
        m = small_model()
        df.train(m, tiny_objects(), s, cfg)
        states.append(m.state_dict())
    for k in states[0]:
        assert torch.equal(states[0][k], states[1][k]), k


def test_divergence_restores_last_finite_state():
    m = small_model()
    s = df.make_schedule(T=20, t_c=5)
    trainer = df.Trainer(m, tiny_objects(), s, df.TrainConfig(batch=4, max_epochs_stage1=3))
    calls = {"n": 0}
    original = trainer._stage1_loss

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        loss, info = original(*args, **kwargs)
        return (loss * float("nan") if calls["n"] > 3 else loss), info

    trainer._stage1_loss = poisoned
    with pytest.raises(df.Diverged) as err:
        trainer.stage1()
    state = err.value.last_state
    assert state is not None
    assert all(torch.isfinite(v).all() for v in state.values())


class PlusXModel(md.GraspScorer):
    """FC logit grows with the mean x of arm 1's query points; energy and collision are flat."""

    def heads(self, tp, pts, t):
        B = pts.shape[0]
        zero = pts.sum(dim=(1, 2)) * 0.0
        return md.HeadOutputs(zero, 20.0 * pts[:, :30, 0].mean(dim=1) - 1.0, torch.zeros(B, 2, dtype=md.DTYPE),
                              torch.zeros(B, 60, dtype=md.DTYPE))


def test_fc_guidance_pushes_arm_one_toward_plus_x():
    m = PlusXModel(gr.default_gripper().query_points, SMALL)
    rng = np.random.default_rng(2)
    h = np.tile(np.eye(4), (5, 2, 1, 1))
    h[..., :3, :3] = geo.random_rotations(rng, 10).reshape(5, 2, 3, 3)
    s = df.make_schedule(T=20, t_c=5)
    base = df.guided_score(m, None, h, 10, s, df.GuidanceConfig(fc_weight=0.0, col_weight=0.0)).numpy()
    guided = df.guided_score(m, None, h, 10, s, df.GuidanceConfig(col_weight=0.0)).numpy()
    diff = guided - base
    assert np.all(diff[:, 0] > 0)
    np.testing.assert_allclose(diff[:, 6:], 0.0, atol=1e-15)


def test_collision_weights_irrelevant_while_gate_closed():
    cloud = ob.sample_surface(ob.box(0.2, 0.1, 0.05), 300, seed=0)
    s = df.make_schedule(T=12, t_c=0)
    a, b = small_model(), small_model()
    with torch.no_grad():
        for p in b.col_head.parameters():
            p.normal_()
    ra, _ = df.sample(a, cloud, 4, s, df.GuidanceConfig(), seed=1)
    rb, _ = df.sample(b, cloud, 4, s, df.GuidanceConfig(), seed=1)
    pa = sorted(x.pose_pair.tobytes() for x in ra)
    pb = sorted(x.pose_pair.tobytes() for x in rb)
    assert pa == pb
