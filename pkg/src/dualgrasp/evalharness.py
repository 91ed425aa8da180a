"""Toy dataset synthesis, grasp metrics and ablation experiments.

Dataset layout::

    manifest.json
    obj/<id>.obj        mesh
    ply/<id>.ply        1000-point surface cloud
    grasps/<id>.json    labeled grasp-pair records

All poses are expressed in the mesh frame, which is also the frame of the
saved cloud.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import diffusion as df
from . import geometry as geo
from .gripper import (GripperModel, NoContact, ObstacleCloud, SamplingExhausted, check_collision, collision_mask,
                      default_gripper, find_contacts, sample_antipodal_grasps)
from .model import GraspScorer, ModelConfig, load_checkpoint, save_checkpoint
from .objects import TriMesh, load_obj, load_ply, make_primitive, sample_surface, save_obj, save_ply
from .stability import ContactSet, StabilityParams, dual_arm_force_closure, gravity_resistance

log = logging.getLogger(__name__)

DATASET_VERSION = 1
VARIANTS = ("full", "no_fc_guidance", "no_collision_guidance", "posthoc_fc")

# six toy objects with thin sections a parallel jaw can span
TOY_SHAPES = (
    {"id": "plate", "type": "plate", "w": 0.35, "d": 0.25, "t": 0.025},
    {"id": "bar", "type": "box", "w": 0.3, "d": 0.04, "h": 0.02},
    {"id": "rod", "type": "cylinder", "r": 0.025, "h": 0.25, "segments": 24},
    {"id": "pipe", "type": "cylinder", "r": 0.02, "h": 0.3, "segments": 24},
    {"id": "bracket", "type": "capped_l", "arm_x": 0.25, "arm_y": 0.2, "thickness": 0.04, "depth": 0.025},
    {"id": "angle", "type": "capped_l", "arm_x": 0.3, "arm_y": 0.2, "thickness": 0.03, "depth": 0.02},
)


def threads() -> int:
    """Worker cap from ``DAGDIFF_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("DAGDIFF_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    n = threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------- schemas

RECORD_SCHEMA = {
    "type": "object",
    "required": ["object_id", "pose_pair", "y_fc", "y_col", "fc_margin", "provenance", "set"],
    "properties": {
        "object_id": {"type": "string"},
        "pose_pair": {"type": "array", "minItems": 2, "maxItems": 2,
                      "items": {"type": "array", "minItems": 4, "maxItems": 4,
                                "items": {"type": "array", "minItems": 4, "maxItems": 4,
                                          "items": {"type": "number"}}}},
        "y_fc": {"enum": [0, 1]},
        "y_col": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"enum": [0, 1]}},
        "fc_margin": {"type": "number", "minimum": 0},
        "provenance": {"enum": ["sampled", "generated"]},
        "set": {"enum": ["main", "perturbed"]},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "seed", "objects", "config"],
    "properties": {
        "version": {"const": DATASET_VERSION},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "mesh", "cloud", "grasps", "mass", "shape", "stability"],
                "properties": {
                    "id": {"type": "string"},
                    "mesh": {"type": "string"},
                    "cloud": {"type": "string"},
                    "grasps": {"type": "string"},
                    "mass": {"type": "number", "exclusiveMinimum": 0},
                    "shape": {"type": "object"},
                    "stability": {"type": "object"},
                },
            },
        },
    },
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "required": ["dataset", "out"],
    "additionalProperties": False,
    "properties": {
        "dataset": {"type": "string"},
        "out": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1},
        "checkpoint": {"type": "string"},
        "posthoc_checkpoint": {"type": "string"},
        "train": {"type": "object"},
        "model": {"type": "object"},
        "schedule": {"type": "object"},
        "guidance": {"type": "object"},
        "sampling": {"type": "object",
                     "properties": {"batch": {"type": "integer", "minimum": 1},
                                    "top_k": {"type": ["integer", "null"], "minimum": 1}}},
        "inflate": {"type": "number", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["config_hash", "seeds", "rows", "aggregate"],
    "properties": {
        "config_hash": {"type": "string"},
        "rows": {"type": "array", "items": {
            "type": "object",
            "required": ["variant", "seed", "object_id", "fce", "gcr", "gsr_proxy", "count", "dropped"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 100} for k in ("fce", "gcr", "gsr_proxy")},
        }},
    },
}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_json(path: Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class DatasetConfig:
    pairs: int = 400
    single_grasps: int = 150
    cloud_points: int = 1000
    perturbed_records: int = 400  # relabeled perturbations of main pairs, per object
    min_separation: float = 0.08  # between the two grasp centers
    min_minority: float = 0.3
    candidate_factor: int = 8  # candidate pair budget per requested pair
    density: float = 300.0  # kg / m^3
    inflate: float = 0.005
    stability: StabilityParams = StabilityParams()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stability"] = self.stability.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "stability" in d:
            d["stability"] = StabilityParams(**d["stability"])
        return cls(**d)


def contact_set(mesh: TriMesh, h: np.ndarray, g: GripperModel) -> ContactSet:
    """Contacts of both arms; raises NoContact if either jaw pair misses."""
    c1 = find_contacts(mesh, h[0], g)
    c2 = find_contacts(mesh, h[1], g)
    return ContactSet(tuple(c1) + tuple(c2), mesh.centroid(), mesh.bounding_radius())


def _capacity(mesh, h, g, params: StabilityParams) -> float:
    try:
        cs = contact_set(mesh, h, g)
    except NoContact:
        return 0.0
    res = dual_arm_force_closure(cs, params.mu, params.edges, params.f_max, probe=params.probe,
                                 beta_min=0.0, per_contact_caps=params.per_contact_caps)
    return float(res.capacities.min())


def _label(mesh, h, cloud, g, cfg: DatasetConfig) -> dict:
    cap = _capacity(mesh, h, g, cfg.stability)
    p = cfg.stability
    return {"pose_pair": h, "y_fc": int(cap >= p.probe),
            "y_col": [int(check_collision(cloud, h[a], g, cfg.inflate)) for a in range(2)],
            "fc_margin": cap if cap >= p.beta_min else 0.0}


def _perturbed_records(mesh, pairs, cloud, g, n, rng, cfg: DatasetConfig):
    """Perturbed copies of dataset pairs with recomputed labels.

    Each arm independently stays put, slides along its approach axis toward
    the surface (mostly producing collisions) or takes a small random twist
    (mostly breaking contact or friction).
    """
    out = []
    for k in rng.integers(0, len(pairs), size=n):
        h = pairs[k].copy()
        for arm in range(2):
            kind = rng.choice(3, p=[0.3, 0.35, 0.35])
            if kind == 1:
                h[arm, :3, 3] += h[arm, :3, 2] * rng.uniform(0.0, 0.04) + rng.normal(scale=0.005, size=3)
            elif kind == 2:
                tw = np.concatenate([rng.normal(scale=0.015, size=3), rng.normal(scale=0.3, size=3)])
                h[arm] = geo.expmap(tw) @ h[arm]
        out.append({**_label(mesh, h, cloud, g, cfg), "set": "perturbed"})
    return out


def generate_object(spec: dict, seed: int, cfg: DatasetConfig, g: GripperModel | None = None) -> dict:
    """Labeled records, cloud and mesh for one shape; raises SamplingExhausted on failure."""
    g = g or default_gripper()
    mesh = make_primitive({k: v for k, v in spec.items() if k != "id"})
    ss = np.random.SeedSequence([seed, int.from_bytes(spec["id"].encode()[:8].ljust(8, b"\0"), "little")])
    s_cloud, s_grasp, s_pair, s_aug = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    cloud = sample_surface(mesh, cfg.cloud_points, seed=s_cloud)
    dense = ObstacleCloud(sample_surface(mesh, 4000, seed=s_cloud + 1))
    grasps = sample_antipodal_grasps(mesh, cfg.single_grasps, cfg.stability.mu, s_grasp, g, collision_cloud=dense,
                                     clearance=cfg.inflate)
    contacts = [find_contacts(mesh, h, g) for h in grasps]
    rng = np.random.default_rng(s_pair)
    p = cfg.stability

    # random pairs of single grasps, kept by rejection until both class quotas are met
    quota = {True: int(round(cfg.pairs * (1 - cfg.min_minority))), False: int(round(cfg.pairs * cfg.min_minority))}
    kept = {True: [], False: []}
    tries, budget = 0, cfg.candidate_factor * cfg.pairs
    while tries < budget and (len(kept[True]) < quota[True] or len(kept[False]) < quota[False]):
        i, j = rng.integers(0, len(grasps), size=2)
        if i == j or np.linalg.norm(grasps[i][:3, 3] - grasps[j][:3, 3]) < cfg.min_separation:
            continue
        tries += 1
        cs = ContactSet(tuple(contacts[i]) + tuple(contacts[j]), mesh.centroid(), mesh.bounding_radius())
        res = dual_arm_force_closure(cs, p.mu, p.edges, p.f_max, probe=p.probe, beta_min=0.0,
                                     per_contact_caps=p.per_contact_caps)
        cap = float(res.capacities.min())
        label = cap >= p.probe
        if len(kept[label]) < quota[label]:
            kept[label].append((np.stack([grasps[i], grasps[j]]), cap))
    if len(kept[True]) < quota[True] or len(kept[False]) < quota[False]:
        raise SamplingExhausted(f"{spec['id']}: {len(kept[True])} positive / {len(kept[False])} negative pairs "
                                f"after {tries} candidates, need {quota[True]} / {quota[False]}")
    order = rng.permutation(cfg.pairs)
    chosen = [(h, cap, 1) for h, cap in kept[True]] + [(h, cap, 0) for h, cap in kept[False]]
    chosen = [chosen[i] for i in order]

    records = []
    for h, cap, y in chosen:
        y_col = [int(check_collision(cloud, h[a], g, cfg.inflate)) for a in range(2)]
        records.append({"pose_pair": h, "y_fc": y, "y_col": y_col,
                        "fc_margin": cap if cap >= p.beta_min else 0.0, "set": "main"})
    pairs = [h for h, _, _ in chosen]
    records += _perturbed_records(mesh, pairs, cloud, g, cfg.perturbed_records, np.random.default_rng(s_aug), cfg)
    for r in records:
        r["object_id"] = spec["id"]
        r["provenance"] = "sampled"
    return {"id": spec["id"], "shape": spec, "mesh": mesh, "cloud": cloud, "records": records,
            "mass": cfg.density * mesh.volume(), "stability": p}


def record_to_json(r: dict) -> dict:
    return {
        "object_id": r["object_id"],
        "pose_pair": geo.dual_to_json(r["pose_pair"]),
        "y_fc": int(r["y_fc"]),
        "y_col": [int(v) for v in r["y_col"]],
        "fc_margin": float(r["fc_margin"]),
        "provenance": r["provenance"],
        "set": r["set"],
    }


def generate_dataset(shapes, seed: int, out_dir, cfg: DatasetConfig = DatasetConfig(),
                     g: GripperModel | None = None) -> dict:
    """Write a dataset directory and return its manifest; failing shapes are skipped and logged."""
    if not shapes:
        raise ValueError("need at least one shape")
    out = Path(out_dir)
    for sub in ("obj", "ply", "grasps"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    def one(spec):
        try:
            return generate_object(spec, seed, cfg, g)
        except SamplingExhausted as exc:
            log.warning("skipping %s: %s", spec.get("id"), exc)
            return None

    entries, skipped = [], []
    for spec, obj in zip(shapes, pmap(one, list(shapes))):
        if obj is None:
            skipped.append(spec["id"])
            continue
        oid = obj["id"]
        save_obj(out / "obj" / f"{oid}.obj", obj["mesh"])
        save_ply(out / "ply" / f"{oid}.ply", obj["cloud"])
        recs = [record_to_json(r) for r in obj["records"]]
        for r in recs:
            jsonschema.validate(r, RECORD_SCHEMA)
        write_json(out / "grasps" / f"{oid}.json", recs)
        entries.append({"id": oid, "mesh": f"obj/{oid}.obj", "cloud": f"ply/{oid}.ply",
                        "grasps": f"grasps/{oid}.json", "mass": obj["mass"], "shape": obj["shape"],
                        "stability": obj["stability"].to_dict()})
    manifest = {"version": DATASET_VERSION, "seed": seed, "config": cfg.to_dict(), "objects": entries,
                "skipped": skipped, "gripper": (g or default_gripper()).to_dict()}
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    write_json(out / "manifest.json", manifest)
    return manifest


@dataclass
class LoadedObject:
    id: str
    mesh: TriMesh
    cloud: np.ndarray
    records: list
    mass: float
    stability: StabilityParams


def load_dataset(path) -> tuple[dict, list[LoadedObject]]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    objs = []
    for e in manifest["objects"]:
        recs = json.loads((root / e["grasps"]).read_text())
        objs.append(LoadedObject(e["id"], load_obj(root / e["mesh"]), load_ply(root / e["cloud"]), recs,
                                 float(e["mass"]), StabilityParams(**e["stability"])))
    return manifest, objs


def train_objects(objs: list[LoadedObject]) -> list[df.TrainObject]:
    out = []
    for o in objs:
        poses = np.stack([geo.dual_from_json(r["pose_pair"]) for r in o.records])
        out.append(df.TrainObject(
            o.id, o.cloud, o.mesh, poses,
            np.array([r["y_fc"] for r in o.records], dtype=float),
            np.array([r["y_col"] for r in o.records], dtype=float),
            np.array([r["set"] == "main" for r in o.records]),
        ))
    return out


# ----------------------------------------------------------------------------- metrics


def _pct(flags) -> float:
    flags = list(flags)
    return 100.0 * sum(flags) / len(flags) if flags else 0.0


def fc_flags(grasps, mesh: TriMesh, params: StabilityParams, g: GripperModel | None = None) -> list[bool]:
    g = g or default_gripper()
    out = []
    for h in grasps:
        try:
            cs = contact_set(mesh, np.asarray(h), g)
        except NoContact:
            out.append(False)
            continue
        out.append(dual_arm_force_closure(cs, params.mu, params.edges, params.f_max, probe=params.probe,
                                          beta_min=params.beta_min, per_contact_caps=params.per_contact_caps).stable)
    return out


def fce(grasps, mesh: TriMesh, params: StabilityParams, g: GripperModel | None = None) -> float:
    """Percentage of pairs whose four contacts exist and achieve force closure."""
    return _pct(fc_flags(grasps, mesh, params, g))


def gcr(grasps, cloud, g: GripperModel | None = None, inflate: float = 0.005) -> float:
    """Percentage of pairs in which either gripper body contains a cloud point."""
    g = g or default_gripper()
    if len(grasps) == 0:
        return 0.0
    h = np.asarray(grasps, dtype=float)
    col = collision_mask(cloud, h.reshape(-1, 4, 4), g, inflate).reshape(-1, 2)
    return _pct(col.any(axis=1))


def gravity_proxy(grasps, mesh: TriMesh, mass: float, params: StabilityParams,
                  g: GripperModel | None = None) -> float:
    """Percentage of pairs whose contacts can hold the object's weight (GSR-proxy)."""
    if not mass > 0:
        raise ValueError("mass must be positive")
    g = g or default_gripper()
    out = []
    for h in grasps:
        try:
            cs = contact_set(mesh, np.asarray(h), g)
        except NoContact:
            out.append(False)
            continue
        out.append(gravity_resistance(cs, mass, params.mu, params.edges, params.f_max,
                                      per_contact_caps=params.per_contact_caps))
    return _pct(out)


# ----------------------------------------------------------------------------- experiments


def variant_guidance(variant: str, base: df.GuidanceConfig) -> df.GuidanceConfig:
    if variant == "no_fc_guidance":
        return replace(base, fc_weight=0.0)
    if variant == "no_collision_guidance":
        return replace(base, col_weight=0.0)
    return base


def build_schedule(cfg: dict) -> tuple[df.NoiseSchedule, float]:
    c = {"T": 250, "sigma_min": 0.005, "sigma_max": 0.5, "t_c": 50, "eta_coeff": 0.25, **cfg}
    return df.make_schedule(c["T"], c["sigma_min"], c["sigma_max"], c["t_c"], c["eta_coeff"]), c["eta_coeff"]


def train_model(objects: list[df.TrainObject], seed: int, train_cfg: dict, model_cfg: dict, schedule,
                fc_loss: bool = True, g: GripperModel | None = None):
    g = g or default_gripper()
    mcfg = ModelConfig(**{**model_cfg, "seed": seed, "steps": schedule.T})
    model = GraspScorer(g.query_points, mcfg)
    tcfg = df.TrainConfig(**{**train_cfg, "seed": seed, "fc_loss": fc_loss})
    history = df.train(model, objects, schedule, tcfg)
    return model, history


def write_history(path: Path, history: df.TrainHistory) -> None:
    keys = ["stage", "epoch", "train_loss", "val_loss", "diff", "fc", "sdf", "col"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history.rows:
            w.writerow({k: row.get(k, "") for k in keys})


def evaluate_object(obj: LoadedObject, poses, inflate: float, g: GripperModel | None = None) -> dict:
    return {
        "fce": fce(poses, obj.mesh, obj.stability, g),
        "gcr": gcr(poses, obj.cloud, g, inflate),
        "gsr_proxy": gravity_proxy(poses, obj.mesh, obj.mass, obj.stability, g),
        "count": len(poses),
    }


def ablation_config(dataset: str, out: str, seeds=(0, 1, 2)) -> dict:
    """The toy ablation: all four variants, three seeds, 32 chains per object."""
    return {
        "dataset": str(dataset), "out": str(out), "seeds": list(seeds), "variants": list(VARIANTS),
        "train": {"max_epochs_stage1": 20, "epochs_stage2": 12, "posthoc_epochs": 12},
        "guidance": {"fc_weight": 8.0, "col_weight": 8.0},
        "sampling": {"batch": 32},
    }


def run_experiment(config_path) -> dict:
    """Run the configured ablation variants and write report.json, report.csv and sampled grasps."""
    cfg = json.loads(Path(config_path).read_text())
    jsonschema.validate(cfg, EXPERIMENT_SCHEMA)
    base_dir = Path(config_path).resolve().parent
    resolve = lambda p: (base_dir / p) if not Path(p).is_absolute() else Path(p)  # noqa: E731
    out = resolve(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _, objs = load_dataset(resolve(cfg["dataset"]))
    tobjs = train_objects(objs)
    seeds = cfg.get("seeds", [0])
    variants = cfg.get("variants", list(VARIANTS))
    schedule, _ = build_schedule(cfg.get("schedule", {}))
    guidance = df.GuidanceConfig(**cfg.get("guidance", {}))
    sampling = {"batch": 32, "top_k": None, **cfg.get("sampling", {})}
    inflate = cfg.get("inflate", 0.005)
    g = default_gripper()

    rows, timings = [], {}
    for seed in seeds:
        models = {}
        for needs_posthoc in sorted({v == "posthoc_fc" for v in variants}):
            key = "posthoc_checkpoint" if needs_posthoc else "checkpoint"
            t0 = time.perf_counter()
            if key in cfg:
                model, _ = load_checkpoint(resolve(cfg[key]))
            else:
                model, history = train_model(tobjs, seed, cfg.get("train", {}), cfg.get("model", {}), schedule,
                                             fc_loss=not needs_posthoc, g=g)
                tag = "posthoc" if needs_posthoc else "main"
                save_checkpoint(model, out / f"model_{tag}_seed{seed}.dagd", {"seed": seed})
                write_history(out / f"loss_{tag}_seed{seed}.csv", history)
            timings[f"train_{int(needs_posthoc)}_seed{seed}"] = time.perf_counter() - t0
            models[needs_posthoc] = model
        for variant in variants:
            model = models[variant == "posthoc_fc"]
            gcfg = variant_guidance(variant, guidance)

            def run_one(obj, model=model, gcfg=gcfg, variant=variant):
                samples, dropped = df.sample(model, obj.cloud, sampling["batch"], schedule, gcfg, seed)
                if sampling["top_k"]:
                    samples = samples[: sampling["top_k"]]
                poses = [s.pose_pair for s in samples]
                res = evaluate_object(obj, poses, inflate, g)
                recs = [{**s.to_json(), "object_id": obj.id, "provenance": "generated", "variant": variant,
                         "seed": seed} for s in samples]
                write_json(out / f"samples_{variant}_seed{seed}_{obj.id}.json", recs)
                return {"variant": variant, "seed": seed, "object_id": obj.id, "dropped": dropped, **res}

            t0 = time.perf_counter()
            rows += pmap(run_one, objs)
            timings[f"sample_{variant}_seed{seed}"] = time.perf_counter() - t0

    aggregate = {}
    for variant in variants:
        sub = [r for r in rows if r["variant"] == variant]
        n = sum(r["count"] for r in sub)
        aggregate[variant] = {
            m: (sum(r[m] * r["count"] for r in sub) / n if n else 0.0) for m in ("fce", "gcr", "gsr_proxy")
        }
        aggregate[variant]["count"] = n
        aggregate[variant]["per_seed_fce"] = {
            str(s): _weighted([r for r in sub if r["seed"] == s], "fce") for s in seeds
        }
    report = {"config_hash": config_hash(cfg), "seeds": seeds, "variants": variants, "rows": rows,
              "aggregate": aggregate, "metric_note": "gsr_proxy is an analytic gravity-resistance stand-in for GSR"}
    jsonschema.validate(report, REPORT_SCHEMA)
    write_json(out / "report.json", report)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "object_id", "metric", "value", "count"])
        for r in rows:
            for m in ("fce", "gcr", "gsr_proxy"):
                w.writerow([r["variant"], r["seed"], r["object_id"], m, f"{r[m]:.6f}", r["count"]])
    write_json(out / "timings.json", {k: round(v, 3) for k, v in timings.items()})
    return report


def _weighted(rows, metric):
    n = sum(r["count"] for r in rows)
    return sum(r[metric] * r["count"] for r in rows) / n if n else 0.0
