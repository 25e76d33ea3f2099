"""Synthetic jaw phantoms with ground-truth implant annotations.

Each phantom is a dental-arch scene on a D x H x W voxel grid, slice index
increasing from the biting surface down toward the jaw bone:

  * the first few slices intersect the cusp tips of the opposing dentition
    (a distinctive, edge-rich occlusal pattern),
  * a row of textured teeth sits on a horseshoe arch, with exactly one
    missing-tooth gap,
  * the gap's vertical extent is the ground-truth implant interval,
  * a low-intensity nerve-canal tube runs through the bone below the
    implant interval.

Tooth and bone texture comes from one band-limited noise field whose depth
correlation length spans several slices, so neighboring slices look alike
and distant slices differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .geometry import Interval

CONDITIONS = ("left", "middle", "right")

# Arch parameterization: tooth slots live at angles inside [THETA_LO, THETA_HI]
# measured from the arch center, ascending angle sweeping left to right.
THETA_LO = 0.14 * math.pi
THETA_HI = 0.86 * math.pi


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and texture knobs for the generator.

    The default is desk-scale; `paper_scale()` returns the full CBCT-sized
    preset (expensive, never needed by the tests).
    """

    depth: int = 96
    height: int = 64
    width: int = 64
    spacing_mm: tuple[float, float, float] = (0.25, 0.25, 0.25)
    tooth_count: int = 7
    with_canal: bool = True
    texture_strength: float = 0.05
    texture_depth_sigma: float = 5.0
    texture_plane_sigma: float = 1.1
    root_taper: float = 0.72      # root radius as a fraction of crown radius
    cusp_tip_depth: float = 0.06  # opposing occlusal reach, fraction of depth
    plate_depth: float = 0.058    # bite-template thickness, fraction of depth
    plate_period: float = 0.10    # template texture period, fraction of min(H, W)

    @classmethod
    def paper_scale(cls) -> "PhantomConfig":
        return cls(depth=432, height=776, width=776)

    def validate(self) -> None:
        for name, value in (("depth", self.depth), ("height", self.height),
                            ("width", self.width)):
            if value < 8:
                raise ConfigError(f"{name}={value} below the minimum of 8")
        if any(s <= 0 for s in self.spacing_mm):
            raise ConfigError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if not 3 <= self.tooth_count <= 24:
            raise ConfigError(
                f"tooth_count={self.tooth_count} leaves no sensible gap placement"
            )
        if not 0 < self.cusp_tip_depth < 0.2:
            raise ConfigError(f"cusp_tip_depth={self.cusp_tip_depth} out of range")


@dataclass(frozen=True)
class Volume:
    """Dense voxel grid (depth, height, width) with physical spacing."""

    voxels: np.ndarray  # float32, values in [0, 1]
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ConfigError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if any(n < 8 for n in self.voxels.shape):
            raise ConfigError(f"volume shape {self.voxels.shape} below minimum 8")
        if any(s <= 0 for s in self.spacing_mm):
            raise ConfigError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.voxels)):
            raise ConfigError("volume contains non-finite intensities")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"intensities outside [0, 1]: min={lo}, max={hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class ImplantAnnotation:
    axial_position: tuple[float, float]  # (row, col) on the crown slice
    interval: Interval                   # ground-truth start/end slice
    condition: str                       # left / middle / right
    canal_slice: float | None = None


@dataclass(frozen=True)
class PatientRecord:
    id: str
    volume: Volume
    annotation: ImplantAnnotation
    crown_slice_index: int

    def __post_init__(self):
        depth, height, width = self.volume.shape
        iv = self.annotation.interval
        if not (0.0 <= iv.start < iv.end <= depth):
            raise ConfigError(f"interval {iv} outside [0, {depth}]")
        row, col = self.annotation.axial_position
        if not (0.0 <= row < height and 0.0 <= col < width):
            raise ConfigError(
                f"axial position {self.annotation.axial_position} outside "
                f"({height}, {width})"
            )
        if self.annotation.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.annotation.condition!r}")
        if not 0 <= self.crown_slice_index < depth:
            raise ConfigError(
                f"crown slice {self.crown_slice_index} outside [0, {depth})"
            )


@dataclass(frozen=True)
class PhantomDebug:
    """Generator-internal placement masks, for tests and visualization."""

    tooth_mask: np.ndarray    # bool, union of rendered teeth
    gap_mask: np.ndarray      # bool, the missing tooth's would-be capsule
    bone_mask: np.ndarray     # bool
    tooth_centers: list[tuple[float, float]]
    gap_index: int


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def _tooth_radius_profile(d: np.ndarray, top: float, bottom: float,
                          crown_r: float, taper: float) -> np.ndarray:
    """Radius as a function of depth: wide crown, gently tapering root."""
    length = bottom - top
    crown_end = top + 0.35 * length
    profile = np.interp(d, [top, crown_end, bottom],
                        [crown_r, crown_r, taper * crown_r])
    return profile.astype(np.float64)


def generate_phantom_debug(
    config: PhantomConfig, seed: int
) -> tuple[PatientRecord, PhantomDebug]:
    """Like generate_phantom, but also returns the placement masks."""
    config.validate()
    rng = np.random.default_rng(seed)
    D, H, W = config.depth, config.height, config.width
    unit = float(min(H, W))
    n = config.tooth_count

    d = np.arange(D, dtype=np.float64)[:, None, None]
    r = np.arange(H, dtype=np.float64)[None, :, None]
    c = np.arange(W, dtype=np.float64)[None, None, :]

    # Arch layout.
    row0 = 0.62 * H + rng.uniform(-0.02, 0.02) * H
    col0 = 0.50 * W + rng.uniform(-0.02, 0.02) * W
    arch_r = 0.36 * unit * (1.0 + rng.uniform(-0.04, 0.04))

    spacing = (THETA_HI - THETA_LO) / n
    thetas = THETA_LO + (np.arange(n) + 0.5) * spacing \
        + rng.uniform(-0.12, 0.12, size=n) * spacing
    crown_tops = D * rng.uniform(0.23, 0.27, size=n)
    root_bottoms = D * rng.uniform(0.70, 0.76, size=n)
    crown_radii = unit * rng.uniform(0.048, 0.058, size=n)
    tip_phases = rng.uniform(0.0, 2.0 * math.pi, size=2)
    tip_waves = float(rng.integers(n, n + 3))       # cusp undulations
    ridge_waves = float(rng.integers(n, n + 4))     # occlusal ridge count

    gap_index = int(rng.integers(n))
    d_canal = D * rng.uniform(0.84, 0.89)
    crown_slice = int(round(D * rng.uniform(0.285, 0.315)))

    # One shared band-limited noise field drives all texture.
    noise = rng.standard_normal((D, H, W))
    noise = gaussian_filter(
        noise,
        sigma=(config.texture_depth_sigma,
               config.texture_plane_sigma,
               config.texture_plane_sigma),
    )
    noise /= max(noise.std(), 1e-12)
    noise = np.clip(noise, -2.5, 2.5)

    centers = [
        (row0 - arch_r * math.sin(t), col0 - arch_r * math.cos(t))
        for t in thetas
    ]

    out = np.full((D, H, W), 0.04, dtype=np.float64)

    # Jaw bone: an annulus around the arch, appearing below the crowns and
    # widening with depth.
    rho = np.sqrt((r - row0) ** 2 + (c - col0) ** 2)
    theta = np.arctan2(row0 - r, col0 - c)
    ang_gate = _sigmoid((theta - (THETA_LO - 0.10)) / 0.05) \
        * _sigmoid(((THETA_HI + 0.10) - theta) / 0.05)
    bone_top = 0.30 * D
    halfwidth = unit * (0.075 + 0.05 * (d / D))
    bone_soft = (
        ang_gate
        * _sigmoid((halfwidth - np.abs(rho - arch_r)) / 0.9)
        * _sigmoid((d - bone_top) / 1.5)
    )
    bone_value = 0.42 + 0.75 * config.texture_strength * noise
    out += bone_soft * (bone_value - out)

    # Nerve canal: dark tube carved through the bone below the roots.
    if config.with_canal:
        canal_e2 = ((rho - arch_r) / (0.030 * unit)) ** 2 \
            + ((d - d_canal) / (0.050 * D)) ** 2
        canal_soft = ang_gate * _sigmoid((1.0 - canal_e2) / 0.25)
        out += canal_soft * (0.12 - out)

    # Teeth: vertical capsules with additive texture; slot `gap_index` is
    # skipped and becomes the implant site.
    tooth_soft_union = np.zeros((D, H, W), dtype=np.float64)
    gap_soft = np.zeros((D, H, W), dtype=np.float64)
    tooth_value = 0.78 + config.texture_strength * noise
    for i, (cr_row, cr_col) in enumerate(centers):
        dist = np.sqrt((r - cr_row) ** 2 + (c - cr_col) ** 2)
        radius = _tooth_radius_profile(
            np.arange(D, dtype=np.float64), crown_tops[i], root_bottoms[i],
            crown_radii[i], config.root_taper)[:, None, None]
        gate = _sigmoid((d - crown_tops[i]) / 1.0) \
            * _sigmoid((root_bottoms[i] - d) / 1.0)
        soft = gate * _sigmoid((radius - dist) / 0.7)
        if i == gap_index:
            gap_soft = soft
            continue
        tooth_soft_union = np.maximum(tooth_soft_union, soft)
        out += soft * (tooth_value - out)

    # Opposing dentition: the incisal/occlusal edge of the other jaw clips
    # the first slices as a ridged annular arc, its reach undulating along
    # the arch (cusps).  Seen end-on this is a dense, edge-rich pattern
    # confined to the top of the stack.
    opp_row0 = row0 + 0.035 * H
    opp_rho = np.sqrt((r - opp_row0) ** 2 + (c - col0) ** 2)
    opp_theta = np.arctan2(opp_row0 - r, col0 - c)
    opp_gate = _sigmoid((opp_theta - THETA_LO) / 0.05) \
        * _sigmoid((THETA_HI - opp_theta) / 0.05)
    cusp_wave = 0.5 + 0.5 * np.cos(tip_waves * opp_theta + tip_phases[0])
    reach = (0.35 + 0.65 * cusp_wave) * config.cusp_tip_depth * D
    ridges = 0.25 + 0.65 * (0.5 + 0.5 * np.cos(ridge_waves * opp_theta
                                               + tip_phases[1]))
    occlusal_value = np.clip(ridges + 0.5 * config.texture_strength * noise,
                             0.0, 1.0)
    occlusal_soft = (
        opp_gate
        * _sigmoid((0.13 * unit - np.abs(opp_rho - arch_r)) / 0.6)
        * _sigmoid((reach - d) / 0.6)
    )
    out += occlusal_soft * (occlusal_value - out)

    # Radiographic bite template: implant-planning scans are acquired with a
    # textured reference plate between the jaws, so the first slices carry a
    # dense static pattern that exists nowhere deeper in the stack.
    period = config.plate_period * unit
    plate_angle = rng.uniform(0.0, math.pi)
    plate_phases = rng.uniform(0.0, 2.0 * math.pi, size=2)
    u = (r * math.cos(plate_angle) + c * math.sin(plate_angle))
    v = (-r * math.sin(plate_angle) + c * math.cos(plate_angle))
    weave = np.cos(2.0 * math.pi * u / period + plate_phases[0]) \
        * np.cos(2.0 * math.pi * v / period + plate_phases[1])
    plate_value = np.clip(0.52 + 0.30 * weave, 0.0, 1.0)
    # Molded plate: its lower face undulates slowly, so the template fades
    # out between roughly 0.6x and 1.0x of the nominal thickness.
    relief = np.cos(2.0 * math.pi * u / (4.5 * period)) \
        * np.cos(2.0 * math.pi * v / (4.5 * period) + plate_phases[0])
    plate_reach = config.plate_depth * D * (0.80 + 0.20 * relief)
    plate_soft = _sigmoid((plate_reach - d) / 0.4)
    out += plate_soft * (plate_value - out)

    voxels = np.clip(out, 0.0, 1.0).astype(np.float32)
    volume = Volume(voxels=voxels, spacing_mm=config.spacing_mm)

    theta_frac = (thetas[gap_index] - THETA_LO) / (THETA_HI - THETA_LO)
    condition = CONDITIONS[min(2, int(theta_frac * 3))]
    annotation = ImplantAnnotation(
        axial_position=centers[gap_index],
        interval=Interval(float(crown_tops[gap_index]),
                          float(root_bottoms[gap_index])),
        condition=condition,
        canal_slice=float(d_canal) if config.with_canal else None,
    )
    record = PatientRecord(
        id=f"phantom-{seed:06d}",
        volume=volume,
        annotation=annotation,
        crown_slice_index=crown_slice,
    )
    debug = PhantomDebug(
        tooth_mask=tooth_soft_union > 0.5,
        gap_mask=gap_soft > 0.5,
        bone_mask=bone_soft > 0.5,
        tooth_centers=centers,
        gap_index=gap_index,
    )
    return record, debug


def generate_phantom(config: PhantomConfig, seed: int) -> PatientRecord:
    """Deterministic phantom for (config, seed); see the module docstring."""
    record, _ = generate_phantom_debug(config, seed)
    return record


def generate_dataset(config: PhantomConfig, count: int,
                     seed: int = 0) -> list[PatientRecord]:
    """`count` phantoms with ids derived from consecutive seeds."""
    if count < 1:
        raise ConfigError(f"count={count} must be positive")
    return [generate_phantom(config, seed + i) for i in range(count)]


def dataset_split(
    records: list[PatientRecord], train_fraction: float, seed: int
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Disjoint shuffled train/test partition; train size floor(f * N)."""
    if len(records) < 2:
        raise ConfigError(f"need at least 2 records to split, got {len(records)}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction={train_fraction} outside (0, 1)")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(math.floor(train_fraction * len(records)))
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    return train, test
