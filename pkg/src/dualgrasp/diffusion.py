"""Noise schedule, training losses, guided score and Langevin sampling on SE(3) x SE(3).

Conventions:

* ``t`` indexes noise levels, ``t = 0`` is the cleanest.  Sampling runs
  ``t = T-1, ..., 0``; at index ``t`` there are ``t + 1`` steps remaining.
* Scores are in noise-normalized units.  The network is trained so that
  ``grad_H E ~ eps / sigma``, hence ``s = -grad_H E`` is ``sigma`` times the
  score of the noised density, and the sampler divides by ``sigma_t`` before
  the Langevin update.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch.nn import functional as F

from . import geometry as geo
from .model import DTYPE, GraspScorer, NonFiniteGradient, Triplane
from .objects import SdfGrid, TriMesh

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class InvalidSchedule(ValueError):
    pass


class Diverged(RuntimeError):
    def __init__(self, message: str, last_state: dict | None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    sigma: np.ndarray
    eta: np.ndarray
    t_c: int

    def steps_remaining(self, t: int) -> int:
        return t + 1

    def collision_active(self, t: int) -> bool:
        return self.steps_remaining(t) <= self.t_c


def make_schedule(T: int = 250, sigma_min: float = 0.005, sigma_max: float = 0.5, t_c: int = 50,
                  eta_coeff: float = 0.25) -> NoiseSchedule:
    """Geometric noise levels ``sigma_min ... sigma_max`` and step sizes ``eta = eta_coeff * sigma``."""
    if T < 2:
        raise InvalidSchedule("need at least 2 steps")
    if not 0 < sigma_min < sigma_max:
        raise InvalidSchedule(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not 0 <= t_c <= T:
        raise InvalidSchedule(f"t_c must lie in [0, T], got {t_c}")
    if eta_coeff < 0:
        raise InvalidSchedule("eta_coeff must be nonnegative")
    sigma = sigma_min * (sigma_max / sigma_min) ** (np.arange(T) / (T - 1))
    sigma[0], sigma[-1] = sigma_min, sigma_max
    return NoiseSchedule(T, sigma, eta_coeff * sigma, t_c)


def perturb(h: np.ndarray, t, schedule: NoiseSchedule, rng: np.random.Generator):
    """``(Exp2(Log2(h) + eps), eps)`` with ``eps ~ N(0, sigma_t^2 I)``; ``t`` may be per-sample."""
    h = np.asarray(h, dtype=float)
    sig = np.asarray(schedule.sigma[np.asarray(t)], dtype=float)
    eps = rng.standard_normal(h.shape[:-3] + (12,)) * sig[..., None]
    return geo.expmap2(geo.logmap2(h) + eps), eps


def score_target(h: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Chart noise ``eps`` expressed as a left twist at the noisy pose: ``J^-T eps`` per arm.

    ``perturb`` adds noise in log coordinates while pose gradients are taken
    w.r.t. left twists; the denoising target for the left-twist gradient of the
    conditional log-density is ``J^-T eps / sigma``, with ``J`` the left
    Jacobian at the (unwrapped) noisy log ``Log2(h) + eps``.
    """
    eps = np.asarray(eps, dtype=float)
    xi = (geo.logmap2(h) + eps).reshape(eps.shape[:-1] + (2, 6))
    J = geo.left_jacobian(xi)
    out = np.linalg.solve(np.swapaxes(J, -1, -2), eps.reshape(xi.shape)[..., None])[..., 0]
    return out.reshape(eps.shape)


def diffusion_loss(score_pred: torch.Tensor, eps: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``|| score_pred - eps / sigma ||_1``."""
    sigma = torch.as_tensor(sigma, dtype=score_pred.dtype).reshape(-1, 1)
    return (score_pred - torch.as_tensor(eps, dtype=score_pred.dtype) / sigma).abs().sum(dim=-1).mean()


def bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    y = torch.as_tensor(y, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def classifier_losses(outputs, y_fc, y_col) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean BCE of the FC head and mean per-arm BCE of the collision head."""
    return bce(outputs.fc_prob, y_fc).mean(), bce(outputs.col_probs, y_col).mean()


@dataclass(frozen=True)
class GuidanceConfig:
    fc_weight: float = 1.0
    col_weight: float = 1.0
    clip: float = 1.0  # max twist norm of each classifier gradient term
    drift_clip: float | None = 0.25  # max per-arm twist norm of one Langevin drift, None to disable
    final_noise: bool = False  # add noise on the last (t = 0) step
    confine: bool = True  # clamp grasp centers to the sampling box after each step

    def __post_init__(self):
        if self.fc_weight < 0 or self.col_weight < 0:
            raise ValueError("guidance weights must be nonnegative")


def clip_norm(g: torch.Tensor, max_norm: float | None) -> torch.Tensor:
    if max_norm is None:
        return g
    n = g.norm(dim=-1, keepdim=True)
    return g * torch.clamp(max_norm / n.clamp_min(1e-300), max=1.0)


def guided_score(model: GraspScorer, tp: Triplane, h, t: int, schedule: NoiseSchedule,
                 guidance: GuidanceConfig) -> torch.Tensor:
    """``-grad E + w_fc grad log C_fc + [active] w_col grad log(1 - C_col)``, shape (B, 12).

    The classifier terms are clipped to ``guidance.clip`` before weighting; the
    collision term is only evaluated in the last ``t_c`` steps.
    """
    s = -model.pose_gradient(h, tp, t, "energy")
    if guidance.fc_weight > 0:
        s = s + guidance.fc_weight * clip_norm(model.pose_gradient(h, tp, t, "log_fc"), guidance.clip)
    if guidance.col_weight > 0 and schedule.collision_active(t):
        s = s + guidance.col_weight * clip_norm(model.pose_gradient(h, tp, t, "log_free"), guidance.clip)
    return s


def _clip_arms(u: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return u
    arms = u.reshape(u.shape[:-1] + (2, 6))
    n = np.linalg.norm(arms, axis=-1, keepdims=True)
    arms = arms * np.minimum(1.0, max_norm / np.maximum(n, 1e-300))
    return arms.reshape(u.shape)


def reverse_step(h: np.ndarray, score: np.ndarray, t: int, schedule: NoiseSchedule,
                 noise: np.ndarray | None, drift_clip: float | None = None) -> np.ndarray:
    """Langevin update ``Exp(eta^2/2 * score + eta * noise) h`` applied per arm on the left.

    ``score`` is the (unnormalized) score at noise level ``t``; ``noise`` holds
    standard normal draws (``None`` for a noiseless step).
    """
    eta = schedule.eta[t]
    u = _clip_arms(0.5 * eta**2 * np.asarray(score, dtype=float), drift_clip)
    if noise is not None:
        u = u + eta * np.asarray(noise, dtype=float)
    return geo.left_update(h, u)


def chain_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-chain streams so chain ``i`` is the same regardless of batch layout."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 0x636861696E]).spawn(n)]


def langevin(h0: np.ndarray, score_fn: Callable[[np.ndarray, int], np.ndarray], schedule: NoiseSchedule,
             rngs: list[np.random.Generator], drift_clip: float | None = None,
             final_noise: bool = False, bounds: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Run the full reverse schedule from ``h0`` (B, 2, 4, 4).

    ``score_fn(h, t)`` returns normalized scores (B, 12); they are divided by
    ``sigma_t`` here.  ``bounds = (lo, hi)`` clamps every grasp center into a
    box after each step.
    """
    h = np.array(h0, dtype=float)
    for t in range(schedule.T - 1, -1, -1):
        s = np.asarray(score_fn(h, t), dtype=float) / schedule.sigma[t]
        noise = None
        if t > 0 or final_noise:
            noise = np.stack([r.standard_normal(12) for r in rngs])
        h = reverse_step(h, s, t, schedule, noise, drift_clip)
        if bounds is not None:
            h[..., :3, 3] = np.clip(h[..., :3, 3], bounds[0], bounds[1])
    return h


def sampling_box(cloud: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The cloud's bounding box scaled by 1.5 about its center."""
    lo, hi = cloud.min(axis=0), cloud.max(axis=0)
    center, half = (lo + hi) / 2, 0.75 * (hi - lo)
    return center - half, center + half


def initial_poses(cloud: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rotations uniform on SO(3)^2, translations uniform in the cloud's bounding box scaled by 1.5."""
    lo, hi = sampling_box(cloud)
    h = np.tile(np.eye(4), (n, 2, 1, 1))
    h[..., :3, :3] = geo.random_rotations(rng, 2 * n).reshape(n, 2, 3, 3)
    h[..., :3, 3] = lo + rng.uniform(0.0, 1.0, size=(n, 2, 3)) * (hi - lo)
    return h


@dataclass
class Sample:
    pose_pair: np.ndarray
    energy: float
    fc_prob: float
    col_probs: tuple[float, float]

    def to_json(self) -> dict:
        return {
            "pose_pair": geo.dual_to_json(self.pose_pair),
            "energy": self.energy,
            "fc_prob": self.fc_prob,
            "col_probs": list(self.col_probs),
        }


def sample(model: GraspScorer, cloud: np.ndarray, batch: int, schedule: NoiseSchedule,
           guidance: GuidanceConfig, seed: int) -> tuple[list[Sample], int]:
    """Draw ``batch`` guided samples; returns them sorted by energy plus the number of dropped chains."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    cloud = np.asarray(cloud, dtype=float)
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x696E6974]))
    h = initial_poses(cloud, batch, init_rng)
    rngs = chain_rngs(seed, batch)
    alive = np.ones(batch, dtype=bool)
    with torch.no_grad():
        tp = model.encode(cloud)

    def score_fn(hh, t):
        idx = np.flatnonzero(alive)
        out = np.zeros((len(hh), 12))
        try:
            out[idx] = guided_score(model, tp, hh[idx], t, schedule, guidance).numpy()
        except NonFiniteGradient:
            for i in idx:  # isolate the failing chains
                try:
                    out[i] = guided_score(model, tp, hh[i : i + 1], t, schedule, guidance).numpy()[0]
                except NonFiniteGradient:
                    alive[i] = False
        return out

    bounds = sampling_box(cloud) if guidance.confine else None
    h = langevin(h, score_fn, schedule, rngs, guidance.drift_clip, guidance.final_noise, bounds)
    alive &= np.isfinite(h).all(axis=(1, 2, 3))
    dropped = int((~alive).sum())
    if dropped:
        log.warning("dropped %d of %d chains with non-finite gradients", dropped, batch)
    h = h[alive]
    if len(h) == 0:
        return [], dropped
    with torch.no_grad():
        out = model(h, tp, 0)
    energy = out.energy.numpy()
    fc = out.fc_prob.numpy()
    col = out.col_probs.numpy()
    order = np.argsort(energy, kind="stable")
    samples = [Sample(h[i], float(energy[i]), float(fc[i]), (float(col[i, 0]), float(col[i, 1]))) for i in order]
    return samples, dropped


# ----------------------------------------------------------------------------- training


@dataclass
class TrainObject:
    """One object's training data; poses are in the cloud's frame."""

    name: str
    cloud: np.ndarray
    mesh: TriMesh
    poses: np.ndarray  # (N, 2, 4, 4)
    y_fc: np.ndarray  # (N,)
    y_col: np.ndarray  # (N, 2)
    main: np.ndarray  # (N,) bool; False marks perturbed (augmentation) records
    sdf_grid: SdfGrid | None = field(default=None, repr=False)  # built on first use

    def sdf(self, points: np.ndarray) -> np.ndarray:
        if self.sdf_grid is None:
            self.sdf_grid = SdfGrid(self.mesh)
        return self.sdf_grid(points)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    max_epochs_stage1: int = 30
    patience: int = 5
    epochs_stage2: int = 5
    posthoc_epochs: int = 5
    val_fraction: float = 0.1
    fc_loss: bool = True  # False trains stage 1 without the FC term and fits the FC head afterwards
    sdf_weight: float = 1.0
    fc_weight: float = 1.0  # weight of the FC term in the stage-1 loss
    augment: bool = True
    seed: int = 0


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (stage, epoch, train_loss, val_loss, diff, fc, sdf, col)

    def add(self, **row):
        self.rows.append(row)


STAGE_IDS = {1: 1, 2: 2, "1b": 3}

# 180 degree roll about the approach (z) axis maps the parallel jaw onto itself
ROLL_PI = np.diag([-1.0, -1.0, 1.0, 1.0])


def augment(h: np.ndarray, y_col: np.ndarray, rng: np.random.Generator):
    """Random arm swap and per-arm half-turn roll; both leave the labels' meaning intact."""
    h = h.copy()
    y_col = y_col.copy()
    swap = rng.random(len(h)) < 0.5
    h[swap] = h[swap][:, ::-1]
    y_col[swap] = y_col[swap][:, ::-1]
    roll = rng.random((len(h), 2)) < 0.5
    h[roll] = h[roll] @ ROLL_PI
    return h, y_col


def _split(obj: TrainObject, frac: float, rng: np.random.Generator):
    idx = rng.permutation(len(obj.poses))
    n_val = int(round(frac * len(idx)))
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


class Trainer:
    """Staged trainer.  Stage 1 fits encoder, trunk, energy, FC and SDF; stage 2 the collision head only."""

    def __init__(self, model: GraspScorer, objects: list[TrainObject], schedule: NoiseSchedule, config: TrainConfig):
        if not objects or not any(len(o.poses) for o in objects):
            raise ValueError("training data is empty")
        self.model, self.objects, self.schedule, self.config = model, objects, schedule, config
        self.history = TrainHistory()
        split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x73706C6974]))
        self.splits = [_split(o, config.val_fraction, split_rng) for o in objects]
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x747261696E]))

    def _batches(self, subset: str, stage: int):
        """Yield (object index, record indices) batches of one object each, shuffled."""
        out = []
        for k, (obj, (tr, va)) in enumerate(zip(self.objects, self.splits)):
            idx = tr if subset == "train" else va
            if stage == 1 and not self.config.fc_loss:
                idx = idx[obj.main[idx]]
            if subset == "train":
                idx = self.rng.permutation(idx)
            out += [(k, idx[i : i + self.config.batch]) for i in range(0, len(idx), self.config.batch)]
        if subset == "train":
            order = self.rng.permutation(len(out))
            out = [out[i] for i in order]
        return out

    def _stage1_loss(self, k, idx, rng, with_fc: bool, train: bool):
        """Diffusion and SDF losses on main records, FC loss on every record of the batch."""
        obj = self.objects[k]
        h, y_col = obj.poses[idx], obj.y_col[idx]
        if train and self.config.augment:
            h, y_col = augment(h, y_col, rng)
        t = rng.integers(0, self.schedule.T, size=len(idx))
        noisy, eps = perturb(h, t, self.schedule, rng)
        tp = self.model.encode(obj.cloud)
        total = torch.zeros((), dtype=DTYPE)
        info = {}
        main = np.flatnonzero(obj.main[idx])
        if len(main):
            tm = torch.as_tensor(t[main])
            grad_e = self.model.pose_gradient(noisy[main], tp, tm, "energy", create_graph=True)
            target = torch.as_tensor(score_target(h[main], eps[main]))
            l_diff = diffusion_loss(grad_e, target, torch.as_tensor(self.schedule.sigma[t[main]]))
            out = self.model(noisy[main], tp, tm)
            pts = self.model.query(torch.as_tensor(noisy[main], dtype=DTYPE)).detach().numpy()
            sd = torch.as_tensor(obj.sdf(pts.reshape(-1, 3)).reshape(len(main), 60))
            l_sdf = (out.sdf - sd).abs().mean()
            total = total + l_diff + self.config.sdf_weight * l_sdf
            info.update(diff=l_diff.item(), sdf=l_sdf.item())
        if with_fc:
            out = self.model(noisy, tp, torch.as_tensor(t))
            l_fc = bce(out.fc_prob, torch.as_tensor(obj.y_fc[idx], dtype=DTYPE)).mean()
            total = total + self.config.fc_weight * l_fc
            info["fc"] = l_fc.item()
        return total, info

    def _head_loss(self, k, idx, rng, head: str, train: bool):
        """Classifier-only loss with frozen features; collision uses low-noise poses (last t_c steps)."""
        obj = self.objects[k]
        h, y_col = obj.poses[idx], obj.y_col[idx]
        if train and self.config.augment:
            h, y_col = augment(h, y_col, rng)
        hi = max(1, self.schedule.t_c) if head == "col" else self.schedule.T
        t = rng.integers(0, hi, size=len(idx))
        noisy, _ = perturb(h, t, self.schedule, rng)
        with torch.no_grad():
            tp = self.model.encode(obj.cloud)
        out = self.model(noisy, tp, torch.as_tensor(t))
        if head == "col":
            loss = bce(out.col_probs, torch.as_tensor(y_col, dtype=DTYPE)).mean()
        else:
            loss = bce(out.fc_prob, torch.as_tensor(obj.y_fc[idx], dtype=DTYPE)).mean()
        return loss, {head: loss.item()}

    def _epoch(self, stage: int, loss_fn, params, opt, epoch: int):
        model = self.model
        total, n = 0.0, 0
        parts: dict[str, float] = {}
        for k, idx in self._batches("train", stage):
            loss, info = loss_fn(k, idx, self.rng, True)
            if not torch.isfinite(loss):
                raise Diverged(f"non-finite loss in stage {stage}, epoch {epoch}", None)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
            for key, v in info.items():
                parts[key] = parts.get(key, 0.0) + v * len(idx)
        # fixed-noise validation so the plateau test is deterministic
        val_rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, STAGE_IDS[stage], 0x76616C]))
        vt, vn = 0.0, 0
        for k, idx in self._batches("val", stage):
            if len(idx) == 0:
                continue
            loss, _ = loss_fn(k, idx, val_rng, False)
            vt += loss.item() * len(idx)
            vn += len(idx)
        row = {"stage": stage, "epoch": epoch, "train_loss": total / max(n, 1), "val_loss": vt / vn if vn else float("nan")}
        row.update({key: v / max(n, 1) for key, v in parts.items()})
        self.history.add(**row)
        log.info("stage %s epoch %d train %.4f val %.4f", stage, epoch, row["train_loss"], row["val_loss"])
        return row

    def _freeze_all_but(self, params):
        keep = {id(p) for p in params}
        for p in self.model.parameters():
            p.requires_grad_(id(p) in keep)

    def stage1(self):
        m = self.model
        params = [*m.encoder_parameters(), *m.trunk_parameters(), *m.energy_head.parameters(),
                  *m.sdf_in.parameters(), *m.sdf_out.parameters()]
        if self.config.fc_loss:
            params += [*m.fc_head.parameters()]
        self._freeze_all_but(params)
        opt = torch.optim.Adam(params, lr=self.config.lr)
        best, best_state, bad = math.inf, copy.deepcopy(m.state_dict()), 0
        last_good = copy.deepcopy(m.state_dict())
        for epoch in range(self.config.max_epochs_stage1):
            try:
                row = self._epoch(1, lambda k, i, r, tr: self._stage1_loss(k, i, r, self.config.fc_loss, tr),
                                  params, opt, epoch)
            except Diverged as exc:
                m.load_state_dict(last_good)
                raise Diverged(str(exc), last_good) from None
            last_good = copy.deepcopy(m.state_dict())
            val = row["val_loss"] if math.isfinite(row["val_loss"]) else row["train_loss"]
            if val < best - 1e-9:
                best, best_state, bad = val, copy.deepcopy(m.state_dict()), 0
            else:
                bad += 1
                if bad >= self.config.patience:
                    break
        m.load_state_dict(best_state)

    def fit_head(self, head: str, epochs: int, stage):
        m = self.model
        params = list((m.col_head if head == "col" else m.fc_head).parameters())
        self._freeze_all_but(params)
        opt = torch.optim.Adam(params, lr=self.config.lr)
        for epoch in range(epochs):
            last_good = copy.deepcopy(m.state_dict())
            try:
                self._epoch(stage, lambda k, i, r, tr: self._head_loss(k, i, r, head, tr), params, opt, epoch)
            except Diverged as exc:
                m.load_state_dict(last_good)
                raise Diverged(str(exc), last_good) from None

    def run(self) -> TrainHistory:
        self.stage1()
        if not self.config.fc_loss:
            self.fit_head("fc", self.config.posthoc_epochs, "1b")
        self.fit_head("col", self.config.epochs_stage2, 2)
        for p in self.model.parameters():
            p.requires_grad_(True)
        return self.history


def train(model: GraspScorer, objects: list[TrainObject], schedule: NoiseSchedule,
          config: TrainConfig = TrainConfig()) -> TrainHistory:
    return Trainer(model, objects, schedule, config).run()


def schedule_to_dict(s: NoiseSchedule, eta_coeff: float) -> dict:
    return {"T": s.T, "sigma_min": float(s.sigma[0]), "sigma_max": float(s.sigma[-1]), "t_c": s.t_c,
            "eta_coeff": eta_coeff}


def guidance_to_dict(g: GuidanceConfig) -> dict:
    return asdict(g)
