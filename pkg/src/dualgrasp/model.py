"""Tri-plane grasp-pair scorer with energy, force-closure and collision heads.

The object cloud is centered, lifted to per-point features by a small MLP and
scatter-averaged onto three axis-aligned planes (XY, XZ, YZ), each smoothed by
one 3x3 convolution.  A grasp pair is scored by moving the gripper's 30-point
query template with both poses, bilinearly sampling the planes at the 60
resulting points and feeding the concatenated features, together with a
sinusoidal embedding of the noise step, through an MLP trunk.

Everything runs in float64 on the CPU.  Pose gradients are taken with respect
to left-perturbation twists ``Exp(u) H`` of each arm.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .objects import EmptyCloud

DTYPE = torch.float64
MAGIC = b"DAGD"
CHECKPOINT_VERSION = 1
OBJECTIVES = ("energy", "log_fc", "log_free")


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 32
    channels: int = 16
    point_hidden: int = 64
    hidden: int = 256
    sdf_hidden: int = 64
    time_dim: int = 16
    extent_factor: float = 1.5
    steps: int = 250  # T, used to normalize the noise step
    seed: int = 0


@dataclass
class Triplane:
    planes: torch.Tensor  # (3, C, G, G): XY, XZ, YZ
    extent: float  # half-width of every plane, meters
    centroid: torch.Tensor  # (3,) cloud centroid in the input frame


@dataclass
class HeadOutputs:
    energy: torch.Tensor  # (B,)
    fc_logit: torch.Tensor  # (B,)
    col_logits: torch.Tensor  # (B, 2)
    sdf: torch.Tensor  # (B, 60)

    @property
    def fc_prob(self) -> torch.Tensor:
        return torch.sigmoid(self.fc_logit)

    @property
    def col_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.col_logits)


# projected coordinate pairs of the three planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def time_embedding(t: torch.Tensor, steps: int, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of ``t / steps`` with geometric frequencies 1, 2, 4, ..."""
    x = torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1) / steps
    freqs = 2.0 ** torch.arange(dim // 2, dtype=DTYPE)
    ang = 2 * math.pi * x * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def grid_coords(xy: torch.Tensor, extent: float, grid: int) -> torch.Tensor:
    """Map plane coordinates in ``[-extent, extent]`` to continuous node indices in ``[0, grid-1]``."""
    return ((xy + extent) / (2 * extent) * (grid - 1)).clamp(0.0, grid - 1.0)


def bilinear(plane: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample ``plane`` (C, G, G) at node coordinates ``uv`` (N, 2); returns (N, C).

    The first coordinate indexes the first grid axis.  Coordinates are assumed
    clamped to the grid, so border queries take border values.
    """
    g = plane.shape[-1]
    i0 = uv.detach().floor().clamp(0, g - 2).long()
    f = uv - i0.to(uv.dtype)
    a, b = i0[:, 0], i0[:, 1]
    fx, fy = f[:, :1], f[:, 1:]
    p = plane.permute(1, 2, 0)  # (G, G, C)
    return (
        p[a, b] * (1 - fx) * (1 - fy)
        + p[a + 1, b] * fx * (1 - fy)
        + p[a, b + 1] * (1 - fx) * fy
        + p[a + 1, b + 1] * fx * fy
    )


def scatter_average(uv: torch.Tensor, feats: torch.Tensor, grid: int) -> torch.Tensor:
    """Average ``feats`` (N, C) into the nearest node of continuous coordinates ``uv``; returns (C, G, G)."""
    idx = uv.detach().round().long()
    flat = idx[:, 0] * grid + idx[:, 1]
    total = torch.zeros(grid * grid, feats.shape[1], dtype=feats.dtype).index_add(0, flat, feats)
    count = torch.zeros(grid * grid, dtype=feats.dtype).index_add(0, flat, torch.ones_like(flat, dtype=feats.dtype))
    return (total / count.clamp_min(1.0)[:, None]).T.reshape(feats.shape[1], grid, grid)


def _uniform_init(layer: nn.Module, gen: torch.Generator) -> None:
    fan_in = layer.weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
        layer.bias.copy_(torch.rand(layer.bias.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)


class GraspScorer(nn.Module):
    def __init__(self, query_points: np.ndarray, config: ModelConfig = ModelConfig()):
        super().__init__()
        if np.shape(query_points) != (30, 3):
            raise ValueError("query template must have shape (30, 3)")
        self.config = config
        c = config
        self.register_buffer("query_points", torch.as_tensor(np.asarray(query_points), dtype=DTYPE))
        self.point_in = nn.Linear(3, c.point_hidden, dtype=DTYPE)
        self.point_out = nn.Linear(c.point_hidden, c.channels, dtype=DTYPE)
        self.smooth = nn.ModuleList(nn.Conv2d(c.channels, c.channels, 3, padding=1, dtype=DTYPE) for _ in range(3))
        self.trunk_in = nn.Linear(60 * c.channels + c.time_dim, c.hidden, dtype=DTYPE)
        self.trunk_mid = nn.Linear(c.hidden, c.hidden, dtype=DTYPE)
        self.energy_head = nn.Linear(c.hidden, 1, dtype=DTYPE)
        self.fc_head = nn.Linear(c.hidden, 1, dtype=DTYPE)
        self.col_head = nn.Linear(c.hidden, 2, dtype=DTYPE)
        self.sdf_in = nn.Linear(c.channels + c.time_dim, c.sdf_hidden, dtype=DTYPE)
        self.sdf_out = nn.Linear(c.sdf_hidden, 1, dtype=DTYPE)
        gen = torch.Generator().manual_seed(c.seed)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                _uniform_init(m, gen)

    # groups used by staged training
    def encoder_parameters(self):
        return [*self.point_in.parameters(), *self.point_out.parameters(), *self.smooth.parameters()]

    def trunk_parameters(self):
        return [*self.trunk_in.parameters(), *self.trunk_mid.parameters()]

    def encode(self, cloud) -> Triplane:
        """Scatter-average per-point features onto the three planes, then smooth."""
        pts = torch.as_tensor(np.asarray(cloud), dtype=DTYPE)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise EmptyCloud("cannot encode an empty cloud")
        c = self.config
        centroid = pts.mean(dim=0)
        local = pts - centroid
        extent = float(c.extent_factor * local.abs().max().clamp_min(1e-3))
        feats = self.point_out(F.silu(self.point_in(local)))
        planes = []
        for k, (a, b) in enumerate(PLANE_AXES):
            raw = scatter_average(grid_coords(local[:, [a, b]], extent, c.grid), feats, c.grid)
            planes.append(self.smooth[k](raw[None])[0])
        return Triplane(torch.stack(planes), extent, centroid)

    def sample_features(self, tp: Triplane, pts: torch.Tensor) -> torch.Tensor:
        """Sum of bilinear lookups on the three planes for points in the input frame: (..., 3) -> (..., C)."""
        shape = pts.shape[:-1]
        local = (pts - tp.centroid).reshape(-1, 3)
        out = 0
        for k, (a, b) in enumerate(PLANE_AXES):
            out = out + bilinear(tp.planes[k], grid_coords(local[:, [a, b]], tp.extent, self.config.grid))
        return out.reshape(*shape, -1)

    def query(self, h: torch.Tensor) -> torch.Tensor:
        """Query template moved by both poses: (B, 2, 4, 4) -> (B, 60, 3)."""
        R, t = h[..., :3, :3], h[..., :3, 3]
        pts = torch.einsum("bakj,nj->bank", R, self.query_points) + t[:, :, None, :]
        return pts.reshape(h.shape[0], 60, 3)

    def heads(self, tp: Triplane, pts: torch.Tensor, t) -> HeadOutputs:
        B = pts.shape[0]
        feats = self.sample_features(tp, pts)  # (B, 60, C)
        temb = time_embedding(t, self.config.steps, self.config.time_dim).expand(B, -1)
        z = torch.cat([feats.reshape(B, -1), temb], dim=-1)
        z = F.silu(self.trunk_mid(F.silu(self.trunk_in(z))))
        per_point = torch.cat([feats, temb[:, None, :].expand(-1, 60, -1)], dim=-1)
        sdf = self.sdf_out(F.silu(self.sdf_in(per_point)))[..., 0]
        return HeadOutputs(self.energy_head(z)[:, 0], self.fc_head(z)[:, 0], self.col_head(z), sdf)

    def forward(self, h, tp: Triplane, t) -> HeadOutputs:
        h = torch.as_tensor(np.asarray(h) if not torch.is_tensor(h) else h, dtype=DTYPE)
        return self.heads(tp, self.query(h), t)

    def _objective(self, out: HeadOutputs, objective: str) -> torch.Tensor:
        if objective == "energy":
            return out.energy
        if objective == "log_fc":
            return F.logsigmoid(out.fc_logit)
        return F.logsigmoid(-out.col_logits).sum(dim=-1)

    def objective(self, h, tp: Triplane, t, objective: str = "energy") -> np.ndarray:
        """Values of a pose-gradient objective at poses ``h`` (B, 2, 4, 4), without gradients."""
        if objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        with torch.no_grad():
            return self._objective(self(h, tp, t), objective).numpy()

    def pose_gradient(self, h, tp: Triplane, t, objective: str = "energy", create_graph: bool = False):
        """Gradient of a scalar objective w.r.t. the left twists of both arms: (B, 12).

        ``objective`` is ``"energy"`` (E), ``"log_fc"`` (log fc_prob) or
        ``"log_free"`` (log(1 - p1) + log(1 - p2), the log-probability that
        neither arm collides).  Each arm's block is ``[sum g, sum p x g]`` over
        its 30 query points, where ``g`` is the objective's gradient at point
        ``p``; this is the chain rule through ``dp/du = [I, -[p]x]``.
        """
        if objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        h = torch.as_tensor(np.asarray(h) if not torch.is_tensor(h) else h, dtype=DTYPE)
        pts = self.query(h)
        if not create_graph:
            pts = pts.detach()
        pts.requires_grad_(True)
        value = self._objective(self.heads(tp, pts, t), objective)
        (g,) = torch.autograd.grad(value.sum(), pts, create_graph=create_graph)
        g = g.reshape(-1, 2, 30, 3)
        p = (pts if create_graph else pts.detach()).reshape(-1, 2, 30, 3)
        twist = torch.cat([g.sum(dim=2), torch.cross(p, g, dim=-1).sum(dim=2)], dim=-1).reshape(-1, 12)
        if not torch.isfinite(twist).all():
            raise NonFiniteGradient(f"non-finite pose gradient for objective {objective}")
        return twist


def save_checkpoint(model: GraspScorer, path, extra: dict | None = None) -> None:
    """Binary tensor blob plus a ``.json`` sidecar holding the model config."""
    path = Path(path)
    blob = bytearray(MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
    state = model.state_dict()
    blob += struct.pack("<I", len(state))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blob += struct.pack("<I", len(raw)) + raw
        blob += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += struct.pack("<Q", arr.nbytes) + arr.tobytes()
    path.write_bytes(bytes(blob))
    meta = {"format": "DAGD", "version": CHECKPOINT_VERSION, "model": asdict(model.config), **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[GraspScorer, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(path.with_suffix(".json").read_text())
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        name = data[off + 4 : off + 4 + n].decode()
        off += 4 + n
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        off += nbytes
        tensors[name] = torch.as_tensor(arr.astype(np.float64))
    model = GraspScorer(tensors["query_points"].numpy(), ModelConfig(**meta["model"]))
    try:
        model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, meta
