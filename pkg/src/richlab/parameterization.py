"""Per-layer hyperparameters (learning rate, init scale, gradient multiplier).

Every on-scale gauge is fixed by the richness ``r`` through ``gamma = n**r``.
All order-one prefactors are exactly 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class GaugeId(str, enum.Enum):
    MUP = "mup"
    RESCALING = "rescaling"
    STP = "stp"
    STANDARD = "standard"

    @property
    def on_scale(self) -> bool:
        return self is not GaugeId.STANDARD

    @classmethod
    def parse(cls, name: "str | GaugeId") -> "GaugeId":
        if isinstance(name, GaugeId):
            return name
        key = str(name).strip().lower().replace("μ", "mu")
        aliases = {"mup": cls.MUP, "mu": cls.MUP, "mu_p": cls.MUP,
                   "rescaling": cls.RESCALING, "mfp": cls.RESCALING,
                   "stp": cls.STP, "standard": cls.STANDARD, "sp": cls.STANDARD}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown gauge {name!r}") from None


@dataclass(frozen=True)
class RichnessSpec:
    r: float
    off_scale_allowed: bool = False

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError("richness out of range")
        if not self.off_scale_allowed and not (0.0 <= self.r <= 0.5):
            raise ValueError("richness out of range")

    def gamma(self, width: int) -> float:
        return float(width) ** self.r


@dataclass(frozen=True)
class NetSpec:
    depth: int
    d_in: int
    width: int
    d_out: int
    activation: str = "linear"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if min(self.d_in, self.width, self.d_out) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.activation not in ("linear", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        """Representation sizes n_0 .. n_L."""
        return [self.d_in] + [self.width] * (self.depth - 1) + [self.d_out]

    def fanin(self, layer: int) -> int:
        """Fan-in of 1-based ``layer``."""
        return self.d_in if layer == 1 else self.width


@dataclass(frozen=True)
class LayerScales:
    eta: tuple[float, ...]
    sigma: tuple[float, ...]
    g: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.eta) == len(self.sigma) == len(self.g)):
            raise ValueError("eta, sigma and g need one entry per layer")
        for v in (*self.eta, *self.sigma, *self.g):
            if not math.isfinite(v):
                raise ValueError("layer scales must be finite")

    @property
    def depth(self) -> int:
        return len(self.eta)

    @property
    def forward_scale(self) -> tuple[float, ...]:
        return tuple(g * s for g, s in zip(self.g, self.sigma))

    @property
    def update_coupling(self) -> tuple[float, ...]:
        return tuple(e * g * g for e, g in zip(self.eta, self.g))


def layer_scales(gauge: GaugeId | str, richness: RichnessSpec, net: NetSpec) -> LayerScales:
    gauge = GaugeId.parse(gauge)
    L, d, n = net.depth, net.d_in, net.width
    rn, rd = math.sqrt(n), math.sqrt(d)
    inner = L - 2  # layers strictly between read-in and readout

    if gauge is GaugeId.STANDARD:
        return LayerScales(eta=(1.0,) * L,
                           sigma=(1.0 / rd,) + (1.0 / rn,) * (L - 1),
                           g=(1.0,) * L)

    gam = richness.gamma(n)
    if gauge is GaugeId.MUP:
        return LayerScales(eta=(1.0,) * L,
                           sigma=(1.0 / gam,) * L,
                           g=(gam / rd,) + (gam / rn,) * inner + (1.0 / rn,))
    if gauge is GaugeId.RESCALING:
        return LayerScales(eta=(gam * gam,) * L,
                           sigma=(1.0,) * L,
                           g=(1.0 / rd,) + (1.0 / rn,) * inner + (1.0 / (gam * rn),))
    # STP
    return LayerScales(eta=(gam * gam / d,) + (gam * gam / n,) * inner + (1.0 / n,),
                       sigma=(1.0 / rd,) + (1.0 / rn,) * inner + (1.0 / (gam * rn),),
                       g=(1.0,) * L)


def gauge_transform(scales: LayerScales, target: GaugeId | str,
                    richness: RichnessSpec, net: NetSpec) -> LayerScales:
    """Move ``scales`` to the ``target`` gauge at the same richness.

    Raises if ``scales`` does not carry the forward scale and update coupling of
    the richness point it claims to sit on.
    """
    target = GaugeId.parse(target)
    if not target.on_scale:
        raise ValueError("standard parameterization is not a gauge of the richness scale")
    if scales.depth != net.depth:
        raise ValueError("scales depth does not match net depth")
    reference = layer_scales(GaugeId.MUP, richness, net)
    for got, want in ((scales.forward_scale, reference.forward_scale),
                      (scales.update_coupling, reference.update_coupling)):
        if not all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(got, want)):
            raise ValueError("scales do not lie on the given richness point")
    return layer_scales(target, richness, net)


def rescaled_emulation(base_r: float, target_r: float, net: NetSpec) -> tuple[float, float]:
    """Output divisor and global learning-rate factor that move a network
    initialized at richness ``base_r`` to train at ``target_r``."""
    RichnessSpec(base_r)
    RichnessSpec(target_r)
    gamma = float(net.width) ** (target_r - base_r)
    return gamma, gamma * gamma


def emulated_scales(scales: LayerScales, gamma: float, lr_factor: float) -> LayerScales:
    """Fold an output division by ``gamma`` and a global learning-rate factor
    into per-layer scales."""
    g = scales.g[:-1] + (scales.g[-1] / gamma,)
    eta = tuple(e * lr_factor for e in scales.eta)
    return LayerScales(eta=eta, sigma=scales.sigma, g=g)


def matches_richness(scales: LayerScales, net: NetSpec, r: float, rel_tol: float = 1e-9) -> tuple[bool, bool]:
    """Whether ``scales`` reproduces the forward scale / update coupling at ``r``."""
    ref = layer_scales(GaugeId.MUP, RichnessSpec(r, off_scale_allowed=True), net)
    fwd = all(math.isclose(a, b, rel_tol=rel_tol) for a, b in zip(scales.forward_scale, ref.forward_scale))
    cpl = all(math.isclose(a, b, rel_tol=rel_tol) for a, b in zip(scales.update_coupling, ref.update_coupling))
    return fwd, cpl
