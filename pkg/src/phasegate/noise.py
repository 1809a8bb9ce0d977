"""Per-shot stochastic imperfections.

Every shot owns a random stream derived from (seed, shot index) through
numpy's SeedSequence, so a realization never depends on which worker drew
it or in what order.  The stream is split into three children: static
parameter noise, scattering/dephasing events and SPAM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class NoiseConfig:
    amplitude_jitter: float = 3e-3  # fractional, per shot
    inhom_broadening: float = 130.0  # Hz, per atom per shot
    f_spread: float = 0.02  # fractional, per beam per shot
    scattering_coeff: float = 3.1e-2  # 1/s per kHz of aux shift
    t2prime: float = 7.0  # s; 0 or inf disables
    spam_loss: float = 0.03
    spam_transfer: float = 0.02
    spam_clearing: float = 0.005

    def __post_init__(self):
        for name in ("amplitude_jitter", "inhom_broadening", "f_spread", "scattering_coeff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("spam_loss", "spam_transfer", "spam_clearing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.t2prime < 0:
            raise ValueError("t2prime must be non-negative")

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def only(self, *names: str) -> "NoiseConfig":
        """Copy keeping just the named channels ('spam' selects all three)."""
        keep = set(names)
        if "spam" in keep:
            keep |= {"spam_loss", "spam_transfer", "spam_clearing"}
        off = NoiseConfig.off()
        return replace(off, **{f.name: getattr(self, f.name) for f in fields(self) if f.name in keep})

    @property
    def spam_enabled(self) -> bool:
        return bool(self.spam_loss or self.spam_transfer or self.spam_clearing)


@dataclass(frozen=True)
class ShotRealization:
    amplitude_factor: float
    atom_detuning: np.ndarray  # Hz per site
    f_factor: dict  # beam id -> factor
    seed: tuple

    def rngs(self) -> tuple[np.random.Generator, np.random.Generator]:
        """(scatter, spam) generators for this shot."""
        ss = np.random.SeedSequence(list(self.seed))
        _, sc, sp = ss.spawn(3)
        return np.random.default_rng(sc), np.random.default_rng(sp)


def shot_entropy(seed: int, shot_index) -> tuple:
    idx = tuple(shot_index) if isinstance(shot_index, (tuple, list)) else (int(shot_index),)
    return (int(seed),) + tuple(int(i) for i in idx)


def sample_shot(cfg: NoiseConfig, seed: int, shot_index, n_sites: int = 125,
                beam_ids: Sequence[str] = ()) -> ShotRealization:
    """Draw the static noise of one shot.

    Beam factors are drawn in sorted beam-id order so the same beam gets the
    same factor whatever else the sequence contains.
    """
    ent = shot_entropy(seed, shot_index)
    ss = np.random.SeedSequence(list(ent))
    rng = np.random.default_rng(ss.spawn(3)[0])
    amp = 1.0 + cfg.amplitude_jitter * rng.standard_normal()
    det = cfg.inhom_broadening * rng.standard_normal(n_sites)
    ids = sorted(set(beam_ids))
    fac = 1.0 + cfg.f_spread * rng.standard_normal(len(ids))
    return ShotRealization(float(amp), det, dict(zip(ids, fac.tolist())), ent)


def scattering_probability(aux_shift_khz, duration, cfg: NoiseConfig):
    """Addressing-light scattering probability for a shift held for duration."""
    s = np.asarray(aux_shift_khz, dtype=float)
    if np.any(s < 0):
        raise ValueError("aux shift must be non-negative")
    p = np.clip(cfg.scattering_coeff * s * duration, 0.0, 1.0)
    return p if p.ndim else float(p)


def t2_decay_factor(elapsed, cfg: NoiseConfig):
    """Coherence multiplier exp(-t / T2') (1 when T2' is disabled)."""
    t = np.asarray(elapsed, dtype=float)
    if np.any(t < 0):
        raise ValueError("elapsed time must be non-negative")
    if cfg.t2prime == 0 or math.isinf(cfg.t2prime):
        out = np.ones_like(t)
    else:
        out = np.exp(-t / cfg.t2prime)
    return out if out.ndim else float(out)


def spam_detect_probability(p1, cfg: NoiseConfig):
    """Probability of counting an atom bright given its |1> probability."""
    p1 = np.asarray(p1, dtype=float)
    keep = (1 - cfg.spam_loss) * (1 - cfg.spam_transfer)
    return keep * (p1 + (1 - p1) * cfg.spam_clearing)


def apply_spam(final_p1, cfg: NoiseConfig, rng: np.random.Generator, initial_ok=None) -> np.ndarray:
    """Sample bright/dark counts.

    An atom is lost (background collision) or misprepared (left outside the
    qubit basis) and then reads dark; otherwise it is projected with
    probability final_p1, and a |0> atom survives clearing with
    spam_clearing.  initial_ok optionally masks atoms known to be absent.
    """
    p1 = np.asarray(final_p1, dtype=float)
    shape = p1.shape
    lost = rng.random(shape) < cfg.spam_loss
    mis = rng.random(shape) < cfg.spam_transfer
    one = rng.random(shape) < p1
    survive = rng.random(shape) < cfg.spam_clearing
    bright = ~lost & ~mis & (one | survive)
    if initial_ok is not None:
        bright &= np.asarray(initial_ok, dtype=bool)
    return bright
