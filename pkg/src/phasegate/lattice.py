"""Lattice occupancy, Gaussian addressing beams and per-stage site classes.

Sites are 0-based integer triples (x, y, z).  A beam travels along x or y
inside one z plane and along one lattice line; its focus sits at a fixed
coordinate along the propagation axis (the lattice centre by default),
which is why off-centre targets need a per-beam power correction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

Site = tuple[int, int, int]

CLASS_THRESHOLD = 0.5
MAX_CALIBRATION_SCALE = 2.0


class SiteClass(str, enum.Enum):
    CROSS = "cross"
    LINE = "line"
    SPECTATOR = "spectator"


@dataclass(frozen=True)
class LatticeConfig:
    dims: tuple[int, int, int] = (5, 5, 5)
    spacing: float = 5.0  # um
    fill_probability: float = 0.40
    occupancy: tuple[Site, ...] | None = None  # explicit occupied sites, else sampled
    neighbor_leakage: bool = False  # add sub-threshold beam light to the aux shift

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError("lattice dims must be positive")
        if not 0.0 <= self.fill_probability <= 1.0:
            raise ValueError("fill probability outside [0, 1]")
        if self.occupancy is not None:
            for s in self.occupancy:
                if not self.contains(s):
                    raise ValueError(f"occupied site {s} outside the lattice")

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    def contains(self, site) -> bool:
        return all(0 <= int(c) < d for c, d in zip(site, self.dims))

    def sites(self) -> list[Site]:
        nx, ny, nz = self.dims
        return [(x, y, z) for z in range(nz) for y in range(ny) for x in range(nx)]

    def index(self, site: Site) -> int:
        x, y, z = site
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def positions(self) -> np.ndarray:
        """(n_sites, 3) site positions in um, ordered like sites()."""
        return np.asarray(self.sites(), dtype=float) * self.spacing

    def centre(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=float) - 1) / 2

    def full(self) -> "LatticeConfig":
        return replace(self, occupancy=tuple(self.sites()), fill_probability=1.0)

    def occupancy_mask(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Boolean mask over sites(); sampled when no explicit occupancy."""
        if self.occupancy is not None:
            mask = np.zeros(self.n_sites, dtype=bool)
            for s in self.occupancy:
                mask[self.index(s)] = True
            return mask
        if rng is None:
            raise ValueError("sampling occupancy needs a random generator")
        return rng.random(self.n_sites) < self.fill_probability


def sample_occupancy(lattice: LatticeConfig, rng: np.random.Generator) -> LatticeConfig:
    mask = rng.random(lattice.n_sites) < lattice.fill_probability
    occ = tuple(s for s, m in zip(lattice.sites(), mask) if m)
    return replace(lattice, occupancy=occ)


@dataclass(frozen=True)
class BeamSpec:
    """One addressing beam.

    axis: propagation axis, "x" or "y".  plane: z index.  line: the
    transverse lattice coordinate it runs along (y for x beams, x for y
    beams).  focus: focus coordinate along the axis, in site units.
    scale: power correction applied on top of the nominal intensity.
    """

    axis: str
    plane: float
    line: float
    focus: float = 2.0
    waist: float = 2.7  # um
    rayleigh_range: float = 26.0  # um
    peak_shift: float = 0.0  # Hz at focus for scale 1
    scale: float = 1.0
    enabled: bool = True
    beam_id: str = ""

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise ValueError("beams must run along x or y")
        if self.waist <= 0 or self.rayleigh_range <= 0:
            raise ValueError("waist and Rayleigh range must be positive")


def gaussian_intensity(beam: BeamSpec, point, spacing: float = 5.0) -> np.ndarray:
    """Relative intensity (focus = 1) at point(s) given in um.

    Beam coordinates (plane, line, focus) are in site units and converted
    with ``spacing``.
    """
    p = np.asarray(point, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if beam.axis == "x":
        zp = x - beam.focus * spacing
        r2 = (y - beam.line * spacing) ** 2 + (z - beam.plane * spacing) ** 2
    else:
        zp = y - beam.focus * spacing
        r2 = (x - beam.line * spacing) ** 2 + (z - beam.plane * spacing) ** 2
    w2 = beam.waist ** 2 * (1 + (zp / beam.rayleigh_range) ** 2)
    return beam.waist ** 2 / w2 * np.exp(-2 * r2 / w2)


@dataclass(frozen=True)
class StageScene:
    beams: tuple[BeamSpec, ...]
    class_of: Mapping[Site, SiteClass]
    aux_shift_of: Mapping[Site, float]
    spacing: float = 5.0
    leakage: bool = False


def _shift_from_intensities(I: np.ndarray, f, k: float, leakage: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-site aux shift and lit-beam count from scaled intensities.

    I: (..., n_beams, n_sites) scaled relative intensities.  Lit beams
    (>= threshold) contribute f*I for a single beam and k*f*mean(I) when two
    or more are lit; sub-threshold light adds f*I only when leakage is on.
    """
    lit = I >= CLASS_THRESHOLD
    n_lit = lit.sum(axis=-2)
    lit_sum = np.where(lit, I, 0.0).sum(axis=-2)
    leak = np.where(lit, 0.0, I).sum(axis=-2)
    mean_lit = np.divide(lit_sum, n_lit, out=np.zeros_like(lit_sum), where=n_lit > 0)
    f = np.asarray(f, dtype=float)
    shift = np.where(n_lit >= 2, k * f * mean_lit, f * lit_sum)
    if leakage:
        shift = shift + f * leak
    return shift, n_lit


def classify_stage(lattice: LatticeConfig, beams: Sequence[BeamSpec], f: float | None = None,
                   k: float = 1.8) -> StageScene:
    """Class and aux shift of every occupied site for one beam configuration.

    f defaults to the beams' peak_shift (all enabled beams must agree).
    """
    active = [b for b in beams if b.enabled]
    for b in active:
        if b.axis not in ("x", "y"):
            raise ValueError("beams must be axis aligned")
    occ = lattice.occupancy if lattice.occupancy is not None else ()
    if not occ:
        return StageScene(tuple(beams), {}, {}, lattice.spacing, lattice.neighbor_leakage)
    if f is None:
        shifts = {b.peak_shift for b in active}
        f = shifts.pop() if len(shifts) == 1 else 0.0
    pts = np.asarray(occ, dtype=float) * lattice.spacing
    if active:
        I = np.stack([b.scale * gaussian_intensity(b, pts, lattice.spacing) for b in active])
    else:
        I = np.zeros((0, len(occ)))
    shift, n_lit = _shift_from_intensities(I, f, k, lattice.neighbor_leakage)
    classes = {}
    for s, n in zip(occ, n_lit):
        classes[s] = SiteClass.CROSS if n >= 2 else SiteClass.LINE if n == 1 else SiteClass.SPECTATOR
    return StageScene(tuple(beams), classes, {s: float(v) for s, v in zip(occ, shift)}, lattice.spacing,
                      lattice.neighbor_leakage)


def aux_shift(site: Site, scene: StageScene, f: float | None = None, k: float = 1.8) -> float:
    """Aux-level shift (Hz) of an occupied site in a scene."""
    if site not in scene.class_of:
        raise ValueError(f"site {site} is not occupied")
    if f is None:
        return scene.aux_shift_of[site]
    # recompute for a different nominal f, keeping the geometry
    spacing = scene.spacing
    active = [b for b in scene.beams if b.enabled]
    pt = np.asarray(site, dtype=float) * spacing
    I = np.array([[b.scale * float(gaussian_intensity(b, pt, spacing))] for b in active]).reshape(len(active), 1)
    shift, _ = _shift_from_intensities(I, f, k, scene.leakage)
    return float(shift[0])


def target_beams(site: Site, lattice: LatticeConfig, template: BeamSpec | None = None,
                 prefix: str = "") -> tuple[BeamSpec, BeamSpec]:
    """The x and y beams that cross at a site, focused at the lattice centre."""
    t = template or BeamSpec("x", 0, 0)
    cx, cy, _ = lattice.centre()
    x, y, z = site
    bx = replace(t, axis="x", plane=z, line=y, focus=cx, beam_id=prefix + "x")
    by = replace(t, axis="y", plane=z, line=x, focus=cy, beam_id=prefix + "y")
    return bx, by


def calibrate_target_intensity(target: Site, beams: Sequence[BeamSpec], f_nominal: float,
                               spacing: float = 5.0) -> tuple[float, ...]:
    """Per-beam power scales making the target's cross shift k * f_nominal.

    Each beam is scaled so that it delivers nominal intensity at the target;
    the cross shift is k times the mean, so this restores k * f_nominal.
    """
    if len(beams) != 2:
        raise ValueError("a target is addressed by exactly two beams")
    pt = np.asarray(target, dtype=float) * spacing
    scales = []
    for b in beams:
        I = float(gaussian_intensity(replace(b, scale=1.0), pt, spacing))
        if I <= 0:
            raise ValueError("target unreachable by beam")
        s = 1.0 / I
        if s > MAX_CALIBRATION_SCALE + 1e-9:
            raise ValueError(f"calibration needs scale {s:.3f} > {MAX_CALIBRATION_SCALE}")
        scales.append(s)
    return tuple(scales)


def stage_shift_matrix(beams: Sequence[BeamSpec], points_um: np.ndarray, f: float, k: float,
                       beam_factors: Mapping[str, np.ndarray] | None = None, spacing: float = 5.0,
                       leakage: bool = False) -> np.ndarray:
    """Aux shift (Hz) of many points under one beam configuration.

    beam_factors maps beam_id to multiplicative shift factors (per shot);
    output has shape broadcast(factor_shape, n_points).
    """
    active = [b for b in beams if b.enabled]
    if not active:
        return np.zeros(np.shape(points_um)[:-1])
    geo = np.stack([b.scale * gaussian_intensity(b, points_um, spacing) for b in active])
    if beam_factors:
        fac = [np.asarray(beam_factors.get(b.beam_id, 1.0), dtype=float) for b in active]
        fac = np.stack(np.broadcast_arrays(*fac), axis=-1)  # (..., n_beams)
        I = fac[..., :, None] * geo
    else:
        I = geo
    shift, _ = _shift_from_intensities(I, f, k, leakage)
    return shift


def lit_mask(beams: Sequence[BeamSpec], points_um: np.ndarray, spacing: float = 5.0) -> np.ndarray:
    """Number of beams illuminating each point above threshold."""
    active = [b for b in beams if b.enabled]
    if not active:
        return np.zeros(np.shape(points_um)[:-1], dtype=int)
    I = np.stack([b.scale * gaussian_intensity(b, points_um, spacing) for b in active])
    return (I >= CLASS_THRESHOLD).sum(axis=0)


def shares_beam_line(a: Site, b: Site) -> bool:
    """True when two targets would share an addressing line."""
    return a[2] == b[2] and (a[0] == b[0] or a[1] == b[1])


# ---------------------------------------------------------------------------
# Pattern files
#
# Plain text, one site per line, 0-based indices:
#     target 1 2 0
#     occupied 3 4 2
# A bare "x y z" line (commas allowed) is read as a target.  "#" starts a
# comment.  Sections may also be introduced by "[targets]" / "[occupied]".


def read_pattern(path) -> dict:
    text = Path(path).read_text()
    return parse_pattern(text)


def parse_pattern(text: str) -> dict:
    out = {"targets": [], "occupied": []}
    section = "targets"
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in out:
                raise ValueError(f"line {n}: unknown section {section!r}")
            continue
        parts = line.replace(",", " ").split()
        tag = section
        if parts[0].lower() in ("target", "targets", "occupied"):
            tag = "targets" if parts[0].lower().startswith("target") else "occupied"
            parts = parts[1:]
        if len(parts) != 3:
            raise ValueError(f"line {n}: expected three indices")
        try:
            site = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"line {n}: non-integer index") from exc
        if min(site) < 0:
            raise ValueError(f"line {n}: negative index")
        out[tag].append(site)
    return out


def write_pattern(path, targets: Iterable[Site], occupied: Iterable[Site] = ()) -> None:
    lines = ["# x y z, 0-based"]
    lines += [f"target {x} {y} {z}" for x, y, z in targets]
    lines += [f"occupied {x} {y} {z}" for x, y, z in occupied]
    Path(path).write_text("\n".join(lines) + "\n")
