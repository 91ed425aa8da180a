"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criterion 6 trains and samples the full toy ablation and takes roughly 20 minutes
on one core.
"""

import json
import time

import numpy as np
import pytest
from oracles import brute_force_stable

from dualgrasp import cli
from dualgrasp import diffusion as df
from dualgrasp import evalharness as eh
from dualgrasp import geometry as geo
from dualgrasp import gripper as gr
from dualgrasp import model as md
from dualgrasp import objects as ob
from dualgrasp import stability as st
from dualgrasp.gripper import Contact


def verdict(capsys, n, name, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {name} | {detail}")
    assert ok, detail


def random_poses(rng, n, max_angle):
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0, max_angle, n)
    return geo.expmap(np.concatenate([rng.uniform(-1, 1, (n, 3)), axis * ang[:, None]], axis=1))


def test_criterion_1_lie_correctness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    poses = random_poses(rng, 10_000, np.pi - 1e-3)
    err = np.abs(geo.expmap(geo.logmap(poses)) - poses).max()
    # each arm of the dual maps must depend on its own block only
    a, b = poses[:5000], poses[5000:]
    v = geo.logmap2(np.stack([a, b], axis=1))
    independent = (np.array_equal(v[:, :6], geo.logmap(a)) and np.array_equal(v[:, 6:], geo.logmap(b))
                   and np.array_equal(geo.expmap2(v)[:, 0], geo.expmap(v[:, :6]))
                   and np.array_equal(geo.expmap2(v)[:, 1], geo.expmap(v[:, 6:])))
    w = v.copy()
    w[:, 6:] = 0.0
    independent &= np.array_equal(geo.expmap2(w)[:, 1], np.broadcast_to(np.eye(4), (5000, 4, 4)))
    dt = time.perf_counter() - t0
    ok = err < 1e-9 and independent and dt < 5.0
    verdict(capsys, 1, "Lie correctness", ok, f"max roundtrip error {err:.2e}, blocks independent {independent}, "
            f"{dt:.2f} s")


def test_criterion_2_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    g = gr.default_gripper()
    rng = np.random.default_rng(2)
    shapes = [ob.box(0.3, 0.1, 0.06), ob.cylinder(0.04, 0.25), ob.plate(0.3, 0.2, 0.02), ob.capped_l(0.25, 0.2, 0.04, 0.03)]
    step, worst, done, skipped = 1e-5, 0.0, 0, 0
    scorer = md.GraspScorer(g.query_points, md.ModelConfig(seed=5))
    while done < 50:
        cloud = ob.sample_surface(shapes[done % 4], 500, seed=int(rng.integers(1 << 30)))
        tp = scorer.encode(cloud)
        h = np.tile(np.eye(4), (2, 1, 1))
        h[:, :3, :3] = geo.random_rotations(rng, 2)
        h[:, :3, 3] = rng.uniform(-0.12, 0.12, size=(2, 3))
        local = gr.grasp_query_points(h, g) - tp.centroid.numpy()
        u = (local + tp.extent) / (2 * tp.extent) * (scorer.config.grid - 1)
        if np.abs(u - np.round(u)).min() < 1e-3:  # in cell widths
            skipped += 1
            continue
        t = int(rng.integers(0, 250))
        for objective in md.OBJECTIVES:
            ours = scorer.pose_gradient(h[None], tp, t, objective)[0].detach().numpy()
            fd = np.zeros(12)
            for k in range(12):
                e = np.zeros(12)
                e[k] = step
                plus = scorer.objective(geo.left_update(h, e)[None], tp, t, objective)
                minus = scorer.objective(geo.left_update(h, -e)[None], tp, t, objective)
                fd[k] = (plus[0] - minus[0]) / (2 * step)
            worst = max(worst, np.linalg.norm(ours - fd) / max(np.linalg.norm(fd), 1e-12))
        done += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 60
    verdict(capsys, 2, "gradient fidelity", ok, f"worst relative error {worst:.2e} over 50 configs x 3 objectives "
            f"({skipped} near cell lines redrawn), {dt:.1f} s")


def test_criterion_3_force_closure_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    meshes = [ob.box(0.2, 0.15, 0.1), ob.cylinder(0.05, 0.2), ob.plate(0.3, 0.2, 0.02)]
    agree, bad_margin = 0, []
    for i in range(200):
        pts, fi = ob.sample_surface(meshes[i % 3], 4, int(rng.integers(1 << 31)), return_faces=True)
        normals = -meshes[i % 3].face_normals()[fi]
        cs = st.ContactSet(tuple(Contact(p, n) for p, n in zip(pts, normals)), meshes[i % 3].centroid(),
                           meshes[i % 3].bounding_radius())
        res = st.dual_arm_force_closure(cs)
        W, owner = st.wrench_basis(cs, 0.5, 8)
        oracle = brute_force_stable(W, owner // 2, np.full(2, 40.0), 1.0, rng)
        if oracle == res.stable:
            agree += 1
        else:
            bad_margin.append(abs(res.capacities.min() - 1.0))

    h = 0.1
    side = st.ContactSet(tuple(Contact(np.array(p, float), np.array(n, float)) for p, n in
                               [((h, 0, 0), (-1, 0, 0)), ((-h, 0, 0), (1, 0, 0)),
                                ((0, h, 0), (0, -1, 0)), ((0, -h, 0), (0, 1, 0))]), np.zeros(3), np.sqrt(3) * h)
    down = np.array([0.0, 0.0, -1.0])
    same = st.ContactSet(tuple(Contact(np.array([x, y, h]), down) for x, y in
                               [(0.05, 0.05), (-0.05, 0.05), (0.05, -0.05), (-0.05, -0.05)]), np.zeros(3), 0.17)
    line = st.ContactSet(tuple(Contact(np.array([x, 0, 0]), np.array([-np.sign(x), 0, 0])) for x in
                               (0.1, -0.1, 0.05, -0.05)), np.zeros(3), 0.1)
    analytic = (st.dual_arm_force_closure(side).stable and not st.dual_arm_force_closure(same).stable
                and not st.dual_arm_force_closure(line, mu=0.0).stable)
    dt = time.perf_counter() - t0
    ok = agree >= 198 and all(m < 1e-3 for m in bad_margin) and analytic and dt < 300
    verdict(capsys, 3, "force-closure oracle agreement", ok, f"{agree}/200 agree, disagreement margins "
            f"{[f'{m:.1e}' for m in bad_margin]}, analytic cases {analytic}, {dt:.1f} s")


def test_criterion_4_sampler_convergence(capsys):
    t0 = time.perf_counter()
    tau = 0.05
    s = df.make_schedule()
    means = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        h0 = np.tile(np.eye(4), (64, 2, 1, 1))
        h0[..., :3, :3] = geo.random_rotations(rng, 128).reshape(64, 2, 3, 3)
        h0[..., :3, 3] = rng.uniform(-0.3, 0.3, size=(64, 2, 3))
        h = df.langevin(h0, lambda hh, t: -geo.logmap2(hh) / tau**2, s, df.chain_rngs(seed, 64),
                        drift_clip=df.GuidanceConfig().drift_clip)
        means.append(float(np.linalg.norm(geo.logmap2(h), axis=-1).mean()))
    dt = time.perf_counter() - t0
    ok = max(means) < 3 * s.sigma[0] and dt < 120
    verdict(capsys, 4, "sampler convergence", ok, f"mean final |log| per seed {[round(m, 4) for m in means]} "
            f"vs bound {3 * s.sigma[0]:.3f}, {dt:.1f} s")


def test_criterion_5_noising_statistics(capsys):
    s = df.make_schedule()
    rng = np.random.default_rng(5)
    base = np.tile(np.eye(4), (10_000, 2, 1, 1))
    worst = 0.0
    for t in (s.T // 4, s.T // 2, s.T - 1):
        noisy, _ = df.perturb(base, np.full(10_000, t), s, rng)
        std = geo.logmap2(noisy).std(axis=0)
        worst = max(worst, np.abs(std / s.sigma[t] - 1).max())
    verdict(capsys, 5, "noising statistics", worst < 0.02, f"worst relative std deviation {100 * worst:.2f}%")


def test_criterion_6_ablation_direction(capsys, tmp_path):
    t0 = time.perf_counter()
    manifest = eh.generate_dataset(eh.TOY_SHAPES, 0, tmp_path / "ds", eh.DatasetConfig())
    cfg = eh.ablation_config("ds", "out")
    (tmp_path / "ablation.json").write_text(json.dumps(cfg))
    report = eh.run_experiment(tmp_path / "ablation.json")
    dt = time.perf_counter() - t0
    agg = report["aggregate"]
    full, nofc, nocol, post = (agg[v] for v in ("full", "no_fc_guidance", "no_collision_guidance", "posthoc_fc"))
    gap = full["fce"] - nofc["fce"]
    checks = {
        "fce gap >= 15": gap >= 15,
        "gcr full <= no_col": full["gcr"] <= nocol["gcr"],
        "posthoc strictly between": min(full["fce"], nofc["fce"]) < post["fce"] < max(full["fce"], nofc["fce"]),
        "runtime < 30 min": dt < 1800,
        "6 objects": len(manifest["objects"]) == 6,
    }
    table = ", ".join(f"{v}: FCE {a['fce']:.1f} GCR {a['gcr']:.1f}" for v, a in agg.items())
    failed = [k for k, v in checks.items() if not v]
    verdict(capsys, 6, "ablation direction", not failed, f"{table}; gap {gap:.1f}; {dt / 60:.1f} min; "
            f"failed: {failed or 'none'}")


def test_criterion_7_metric_degenerate_cases(capsys, tmp_path):
    bar = {"id": "bar", "type": "box", "w": 0.3, "d": 0.04, "h": 0.02}
    cfg = eh.DatasetConfig(pairs=20, single_grasps=40, perturbed_records=0, cloud_points=400, candidate_factor=40)
    eh.generate_dataset([bar], 1, tmp_path, cfg)
    _, (obj,) = eh.load_dataset(tmp_path)
    stable = [geo.dual_from_json(r["pose_pair"]) for r in obj.records if r["y_fc"] == 1]
    far = np.tile(np.eye(4), (10, 2, 1, 1))
    far[:, 0, :3, 3] = [1.0, 0.0, 0.0]
    far[:, 1, :3, 3] = [0.0, 1.0, 0.5]
    lo, hi = obj.cloud.min(axis=0) - 0.005, obj.cloud.max(axis=0) + 0.005
    body = np.concatenate([gr.grasp_query_points(h, gr.default_gripper()).reshape(-1, 3) for h in far])
    outside = bool(np.any((body < lo) | (body > hi), axis=1).all())
    sweep = [eh.gravity_proxy(stable, obj.mesh, m, obj.stability) for m in np.geomspace(0.01, 1000, 12)]
    values = {
        "fce free space": eh.fce(far, obj.mesh, obj.stability),
        "fce stable fixtures": eh.fce(stable, obj.mesh, obj.stability),
        "gcr outside box": eh.gcr(far, obj.cloud, inflate=0.005),
    }
    ok = (values["fce free space"] == 0.0 and values["fce stable fixtures"] == 100.0 and outside
          and values["gcr outside box"] == 0.0 and all(a >= b for a, b in zip(sweep, sweep[1:])))
    verdict(capsys, 7, "metric degenerate cases", ok, f"{values}, {len(stable)} fixtures, gravity sweep "
            f"{[round(v, 1) for v in sweep]}")


def pipeline(root):
    root.mkdir()
    assert cli.main(["gen-data", "--shapes", "bar,rod", "--pairs", "16", "--perturbed", "8", "--candidate-factor",
                     "40", "--seed", "4", "--out", str(root / "ds")]) == 0
    assert cli.main(["train", "--data", str(root / "ds"), "--out", str(root / "run"), "--epochs-stage1", "2",
                     "--epochs-stage2", "1", "--seed", "4", "--T", "20", "--t-c", "5"]) == 0
    assert cli.main(["sample", "--ckpt", str(root / "run" / "model.dagd"), "--cloud", str(root / "ds" / "ply" / "bar.ply"),
                     "--batch", "6", "--seed", "4", "--T", "20", "--t-c", "5", "--out", str(root / "grasps.json")]) == 0
    cfg = {"dataset": "ds", "out": "eval", "seeds": [4], "variants": ["full", "no_fc_guidance"],
           "checkpoint": "run/model.dagd", "schedule": {"T": 20, "t_c": 5}, "sampling": {"batch": 4}}
    (root / "exp.json").write_text(json.dumps(cfg))
    assert cli.main(["eval", "--config", str(root / "exp.json")]) == 0
    files = ["ds/grasps/bar.json", "ds/grasps/rod.json", "run/model.dagd", "run/loss.csv", "grasps.json",
             "eval/report.json", "eval/report.csv", "eval/samples_full_seed4_bar.json"]
    return {f: (root / f).read_bytes() for f in files}


def test_criterion_8_reproducibility(capsys, tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    same = {f: a[f] == b[f] for f in a}
    verdict(capsys, 8, "reproducibility", all(same.values()), f"byte-identical: {same}")
