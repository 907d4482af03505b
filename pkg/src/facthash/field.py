"""Hybrid decoder: density MLP on encoded features, color MLP on geometry + SH."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

SH_DIM = 16

# Real spherical harmonics without the Condon-Shortley phase, degrees 0..3.
# Component order is degree-major, m ascending: (0,0), (1,-1), (1,0), (1,1),
# (2,-2) ... (3,3).
_C00 = 0.5 * math.sqrt(1.0 / math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2a = 0.5 * math.sqrt(15.0 / math.pi)
_C20 = 0.25 * math.sqrt(5.0 / math.pi)
_C22 = 0.25 * math.sqrt(15.0 / math.pi)
_C33 = 0.25 * math.sqrt(35.0 / (2.0 * math.pi))
_C32 = 0.5 * math.sqrt(105.0 / math.pi)
_C31 = 0.25 * math.sqrt(21.0 / (2.0 * math.pi))
_C30 = 0.25 * math.sqrt(7.0 / math.pi)
_C32b = 0.25 * math.sqrt(105.0 / math.pi)


def sh_basis(d: torch.Tensor) -> torch.Tensor:
    """16 real SH values for unit directions ``(..., 3)`` (no norm check)."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return torch.stack(
        [
            torch.full_like(x, _C00),
            _C1 * y,
            _C1 * z,
            _C1 * x,
            _C2a * x * y,
            _C2a * y * z,
            _C20 * (3.0 * zz - 1.0),
            _C2a * x * z,
            _C22 * (xx - yy),
            _C33 * y * (3.0 * xx - yy),
            _C32 * x * y * z,
            _C31 * y * (5.0 * zz - 1.0),
            _C30 * z * (5.0 * zz - 3.0),
            _C31 * x * (5.0 * zz - 1.0),
            _C32b * z * (xx - yy),
            _C33 * x * (xx - 3.0 * yy),
        ],
        dim=-1,
    )


def sh_encode(direction: torch.Tensor) -> torch.Tensor:
    direction = torch.as_tensor(direction)
    norm = torch.linalg.vector_norm(direction.double(), dim=-1)
    if not torch.all(torch.abs(norm - 1.0) <= 1e-6):
        raise ValueError("sh_encode expects unit directions")
    return sh_basis(direction)


def _kaiming_linear(n_in: int, n_out: int, generator: Optional[torch.Generator], dtype) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=dtype)
    bound = math.sqrt(6.0 / n_in)
    with torch.no_grad():
        w = torch.rand(n_out, n_in, generator=generator, dtype=torch.float64) * 2.0 - 1.0
        layer.weight.copy_(w * bound)
        layer.bias.zero_()
    return layer


class MlpParams(nn.Module):
    """Weights of both decoder networks.

    density net: ``in_dim -> hidden -> 1 + geo_dim``;
    color net: ``geo_dim + 16 -> hidden -> hidden -> 3``. ReLU hidden activations.
    """

    def __init__(self, in_dim: int, geo_dim: int = 15, density_hidden: int = 64,
                 color_hidden: int = 64, color_layers: int = 2,
                 dtype: torch.dtype = torch.float32, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.in_dim = in_dim
        self.geo_dim = geo_dim
        self.density = nn.ModuleList([
            _kaiming_linear(in_dim, density_hidden, generator, dtype),
            _kaiming_linear(density_hidden, 1 + geo_dim, generator, dtype),
        ])
        widths = [geo_dim + SH_DIM] + [color_hidden] * color_layers + [3]
        self.color = nn.ModuleList(
            [_kaiming_linear(a, b, generator, dtype) for a, b in zip(widths[:-1], widths[1:])]
        )


def _run(layers: nn.ModuleList, h: torch.Tensor) -> torch.Tensor:
    for i, layer in enumerate(layers):
        h = layer(h)
        if i < len(layers) - 1:
            h = F.relu(h)
    return h


def density_head(feature: torch.Tensor, params: MlpParams) -> Tuple[torch.Tensor, torch.Tensor]:
    if feature.shape[-1] != params.in_dim:
        raise ValueError(f"feature length {feature.shape[-1]} != density net input {params.in_dim}")
    out = _run(params.density, feature)
    return F.softplus(out[..., 0]), out[..., 1:]


def color_head(geo_feature: torch.Tensor, sh: torch.Tensor, params: MlpParams) -> torch.Tensor:
    if geo_feature.shape[-1] != params.geo_dim or sh.shape[-1] != SH_DIM:
        raise ValueError(
            f"color net expects {params.geo_dim}+{SH_DIM} inputs, got "
            f"{geo_feature.shape[-1]}+{sh.shape[-1]}"
        )
    return torch.sigmoid(_run(params.color, torch.cat([geo_feature, sh], dim=-1)))


class RadianceField(nn.Module):
    """Encoder + decoder. Positions are world-space; ``aabb`` maps them to the unit cube."""

    def __init__(self, encoder: nn.Module, mlp: MlpParams, aabb: torch.Tensor):
        super().__init__()
        self.encoder = encoder
        self.mlp = mlp
        self.register_buffer("aabb", torch.as_tensor(aabb, dtype=torch.float64).reshape(2, 3))

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.tables.data.dtype

    def normalize(self, pts: torch.Tensor) -> torch.Tensor:
        lo, hi = self.aabb[0], self.aabb[1]
        x = (pts.to(torch.float64) - lo) / (hi - lo)
        return x.clamp(0.0, 1.0).to(self.dtype)

    def density(self, pts: torch.Tensor) -> torch.Tensor:
        feat = self.encoder(self.normalize(pts), check=False)
        return density_head(feat, self.mlp)[0]

    def forward(self, pts: torch.Tensor, dirs: torch.Tensor):
        feat = self.encoder(self.normalize(pts), check=False)
        sigma, geo = density_head(feat, self.mlp)
        rgb = color_head(geo, sh_basis(dirs.to(self.dtype)), self.mlp)
        return sigma, rgb
