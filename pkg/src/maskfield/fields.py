"""FiLM-conditioned sinusoidal radiance field and its latent mapping network.

The generator is a pair (mapping, field): the mapping network turns a latent
vector z into per-layer frequency/phase pairs, and the field evaluates
sin(freq * (W h + b) + phase) layers to produce density and view-dependent
color. Density branches off before the direction-conditioned color layer, so
it never sees the viewing direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import FieldConfig
from .errors import ConfigurationError, InputError


@dataclass
class StyleCode:
    """Per-layer FiLM conditioning: `freq` and `phase`, each (..., L, W).

    Leading dimensions are batch dimensions. Offsets produced by the
    inversion encoder and the average codes used by truncation share this
    structure, so the same class is used for all three roles.
    """

    freq: torch.Tensor
    phase: torch.Tensor

    def __post_init__(self) -> None:
        if self.freq.shape != self.phase.shape:
            raise InputError(
                f"freq/phase shapes differ: {tuple(self.freq.shape)} vs {tuple(self.phase.shape)}"
            )
        if self.freq.ndim < 2:
            raise InputError("style tensors need at least (layers, width) dims")

    @property
    def n_layers(self) -> int:
        return self.freq.shape[-2]

    @property
    def width(self) -> int:
        return self.freq.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return tuple(self.freq.shape[:-2])

    def layer(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.freq[..., i, :], self.phase[..., i, :]

    def flatten(self) -> torch.Tensor:
        """Blocked-by-layer flattening: [freq_1, phase_1, freq_2, phase_2, ...]."""
        stacked = torch.stack((self.freq, self.phase), dim=-2)  # (..., L, 2, W)
        return stacked.reshape(*self.batch_shape, -1)

    @classmethod
    def from_flat(cls, flat: torch.Tensor, n_layers: int, width: int) -> "StyleCode":
        expected = 2 * n_layers * width
        if flat.shape[-1] != expected:
            raise InputError(
                f"flat style length {flat.shape[-1]} != 2 * {n_layers} * {width}"
            )
        stacked = flat.reshape(*flat.shape[:-1], n_layers, 2, width)
        return cls(freq=stacked[..., 0, :], phase=stacked[..., 1, :])

    def map(self, fn) -> "StyleCode":
        return StyleCode(freq=fn(self.freq), phase=fn(self.phase))

    def detach(self) -> "StyleCode":
        return self.map(lambda t: t.detach())

    def clone(self) -> "StyleCode":
        return self.map(lambda t: t.clone())

    def to(self, *args, **kwargs) -> "StyleCode":
        return self.map(lambda t: t.to(*args, **kwargs))

    def __add__(self, other: "StyleCode") -> "StyleCode":
        if self.freq.shape != other.freq.shape:
            raise InputError(
                f"style shapes differ: {tuple(self.freq.shape)} vs {tuple(other.freq.shape)}"
            )
        return StyleCode(freq=self.freq + other.freq, phase=self.phase + other.phase)

    def allclose(self, other: "StyleCode", **kwargs) -> bool:
        return torch.allclose(self.freq, other.freq, **kwargs) and torch.allclose(
            self.phase, other.phase, **kwargs
        )


# Roles the encoder/truncation machinery distinguishes by name only.
LatentOffset = StyleCode
StyleAverages = StyleCode


class MappingNetwork(nn.Module):
    """Latent MLP producing the per-layer frequency/phase conditioning.

    Frequencies come out as `1 + raw` so a small-weight head starts the
    sinusoid layers near their base scale (the base frequency itself is folded
    into the first field layer's weight init).
    """

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        dims = [cfg.latent_dim] + [cfg.mapping_hidden] * cfg.mapping_layers
        layers: list[nn.Module] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            layers.append(_seeded_linear(d_in, d_out, gen))
            layers.append(nn.LeakyReLU(0.2))
        self.body = nn.Sequential(*layers)
        self.head = _seeded_linear(cfg.mapping_hidden, cfg.style_size, gen)
        with torch.no_grad():
            self.head.weight.mul_(0.25)  # tame initial style variance

    def forward(self, z: torch.Tensor) -> StyleCode:
        if z.shape[-1] != self.cfg.latent_dim:
            raise InputError(
                f"latent dim {z.shape[-1]} != configured {self.cfg.latent_dim}"
            )
        if not torch.isfinite(z).all():
            raise InputError("latent vector contains non-finite entries")
        flat = self.head(self.body(z))
        code = StyleCode.from_flat(flat, self.cfg.n_layers, self.cfg.hidden_width)
        return StyleCode(freq=code.freq + 1.0, phase=code.phase)


def _seeded_linear(d_in: int, d_out: int, gen: torch.Generator) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    bound = 1.0 / math.sqrt(d_in)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-bound, bound, generator=gen)
    return lin


class FilmSirenField(nn.Module):
    """Sinusoidal MLP with feature-wise conditioning.

    Layers 1..L-1 process the position; layer L sees [hidden, direction] and
    feeds the color head, keeping density direction-independent. Density uses
    a shifted softplus, color a logistic squashing.
    """

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        w = cfg.hidden_width
        trunk = []
        for i in range(cfg.n_layers - 1):
            d_in = 3 if i == 0 else w
            trunk.append(_siren_linear(d_in, w, gen, cfg.base_frequency, first=(i == 0)))
        self.trunk = nn.ModuleList(trunk)
        self.color_film = _siren_linear(w + 3, w, gen, cfg.base_frequency, first=False)
        self.density_head = _seeded_linear(w, 1, gen)
        self.color_head = _seeded_linear(w, 3, gen)

    def forward(
        self, positions: torch.Tensor, directions: torch.Tensor, style: StyleCode
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (density (...,), color (..., 3)) for query points.

        `positions`/`directions` are (..., N, 3); `style` is unbatched (L, W)
        or carries matching leading batch dims (B, L, W) against (B, N, 3).
        """
        self._check_queries(positions, directions)
        self._check_style(style)
        h = positions
        for i, lin in enumerate(self.trunk):
            freq, phase = style.layer(i)
            h = torch.sin(freq.unsqueeze(-2) * lin(h) + phase.unsqueeze(-2))
        density = nn.functional.softplus(
            self.density_head(h).squeeze(-1) + self.cfg.density_shift
        )
        freq, phase = style.layer(self.cfg.n_layers - 1)
        g = torch.sin(
            freq.unsqueeze(-2) * self.color_film(torch.cat([h, directions], dim=-1))
            + phase.unsqueeze(-2)
        )
        color = torch.sigmoid(self.color_head(g))
        return density, color

    def _check_queries(self, positions: torch.Tensor, directions: torch.Tensor) -> None:
        if positions.shape[-1] != 3 or directions.shape[-1] != 3:
            raise InputError("positions and directions must have a trailing dim of 3")
        if positions.shape != directions.shape:
            raise InputError(
                f"positions {tuple(positions.shape)} vs directions "
                f"{tuple(directions.shape)} shape mismatch"
            )
        if not (torch.isfinite(positions).all() and torch.isfinite(directions).all()):
            raise InputError("field queries contain non-finite entries")
        norms = directions.norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise InputError("directions must be unit-norm within 1e-6")

    def _check_style(self, style: StyleCode) -> None:
        if style.n_layers != self.cfg.n_layers or style.width != self.cfg.hidden_width:
            raise ConfigurationError(
                f"style shape ({style.n_layers}, {style.width}) does not match field "
                f"config ({self.cfg.n_layers}, {self.cfg.hidden_width})"
            )


def _siren_linear(
    d_in: int, d_out: int, gen: torch.Generator, base_freq: float, first: bool
) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    if first:
        bound = base_freq / d_in
    else:
        bound = math.sqrt(6.0 / d_in) / base_freq
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-bound, bound, generator=gen)
    return lin


class SceneGenerator(nn.Module):
    """Mapping network plus FiLM-SIREN field; the full latent-to-radiance map."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg)
        self.field = FilmSirenField(cfg)

    def map_latent(self, z: torch.Tensor) -> StyleCode:
        return self.mapping(z)

    def query_field(
        self, positions: torch.Tensor, directions: torch.Tensor, style: StyleCode
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.field(positions, directions, style)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def neutral_style(self, batch_shape: tuple[int, ...] = ()) -> StyleCode:
        """freq=1, phase=0 everywhere: each layer collapses to plain sin(Wh+b)."""
        shape = (*batch_shape, self.cfg.n_layers, self.cfg.hidden_width)
        p = next(self.parameters())
        return StyleCode(
            freq=torch.ones(shape, dtype=p.dtype, device=p.device),
            phase=torch.zeros(shape, dtype=p.dtype, device=p.device),
        )


class PlainSirenField(nn.Module):
    """Unconditioned twin of FilmSirenField sharing its weights.

    Exists to pin down the FiLM reduction: with freq=1 and phase=0 the
    conditioned field must match this network bitwise.
    """

    def __init__(self, film: FilmSirenField):
        super().__init__()
        self.film = film

    def forward(
        self, positions: torch.Tensor, directions: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = positions
        for lin in self.film.trunk:
            h = torch.sin(lin(h))
        density = nn.functional.softplus(
            self.film.density_head(h).squeeze(-1) + self.film.cfg.density_shift
        )
        g = torch.sin(self.film.color_film(torch.cat([h, directions], dim=-1)))
        color = torch.sigmoid(self.film.color_head(g))
        return density, color
