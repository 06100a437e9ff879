"""Wells: Peaceman indices, constraints, schedules, and limit switching.

Perforation rates follow q = WI * M * (p_h - p_alpha - rho_alpha * G *
(z_h - z)), positive into the reservoir. Producers flow every mobile phase
with the cell's phase mobilities; injectors use the cell's total relative
mobility divided by the injected phase's formation volume factor. A
rate-controlled well owns one extra unknown, its bottom-hole pressure p_h; a
BHP-controlled well contributes no unknown or residual row.

Rates at the well level are surface rates. Producer gas includes gas
dissolved in the produced oil.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, InputError
from .units import GRAVITY


def peaceman_index(kx, ky, dx, dy, dz, rw, skin=0.0):
    """Well index of a vertical perforation through one cell, SI units.

    r_o = 0.28 * sqrt(sqrt(ky/kx)*dx^2 + sqrt(kx/ky)*dy^2)
              / ((ky/kx)^(1/4) + (kx/ky)^(1/4))
    WI  = 2*pi*sqrt(kx*ky)*dz / (ln(r_o/r_w) + skin)
    """
    if kx <= 0.0 or ky <= 0.0:
        raise GeometryError("perforated cell needs positive horizontal permeability")
    if rw <= 0.0:
        raise InputError("well radius must be positive")
    a = np.sqrt(ky / kx)
    b = np.sqrt(kx / ky)
    ro = 0.28 * np.sqrt(a * dx * dx + b * dy * dy) / (np.sqrt(a) + np.sqrt(b))
    if ro <= rw:
        raise GeometryError(
            f"equivalent radius r_o={ro:.4g} m does not exceed r_w={rw:.4g} m; "
            "cell too small for the Peaceman model")
    denom = np.log(ro / rw) + skin
    if denom <= 0.0:
        raise GeometryError(f"ln(r_o/r_w) + skin = {denom:.4g} must be positive")
    return 2.0 * np.pi * np.sqrt(kx * ky) * dz / denom


def perforation_rate(wi, mobility, p_h, p_phase, rho_phase, z_h, z):
    """Volumetric surface rate of one phase through one perforation."""
    return wi * mobility * (p_h - p_phase - rho_phase * GRAVITY * (z_h - z))


@dataclass(frozen=True)
class Perforation:
    cell: int            # grid gid
    wi: float            # Peaceman index, m^3
    depth: float         # perforation depth, m


@dataclass(frozen=True)
class Well:
    name: str
    kind: str            # 'producer' | 'injector'
    ref_depth: float     # datum z_h for the hydrostatic correction
    perforations: tuple
    inj_phase: str = "water"   # injectors only: 'water' | 'gas'

    def __post_init__(self):
        if self.kind not in ("producer", "injector"):
            raise InputError(f"well kind must be producer or injector, got {self.kind!r}")
        if self.inj_phase not in ("water", "gas"):
            raise InputError(f"injection phase must be water or gas, got {self.inj_phase!r}")
        if not self.perforations:
            raise InputError(f"well {self.name} has no perforations")


RATE_KINDS = ("orat", "wrat", "lrat", "rate")  # rate = injector surface rate


@dataclass(frozen=True)
class WellControl:
    """Operating mode of one well for one timestep.

    mode 'bhp' pins p_h at value [Pa]; mode 'rate' pins the surface rate of
    `kind` at value [m^3/s], always positive (produced or injected). The
    opposite-side limits drive within-step switching; None disables a limit.
    """

    mode: str
    value: float
    kind: str = None           # rate kind when mode == 'rate'
    bhp_limit: float = None    # rate wells: producer min / injector max p_h
    rate_limit: float = None   # bhp wells: max surface rate
    rate_limit_kind: str = None

    def __post_init__(self):
        if self.mode not in ("bhp", "rate"):
            raise InputError(f"control mode must be bhp or rate, got {self.mode!r}")
        if self.mode == "rate":
            if self.kind not in RATE_KINDS:
                raise InputError(f"rate control needs a kind from {RATE_KINDS}")
            if self.value < 0:
                raise InputError("rate targets are magnitudes, must be >= 0")
        if self.rate_limit is not None and self.rate_limit_kind not in RATE_KINDS:
            raise InputError("rate_limit needs rate_limit_kind")


@dataclass(frozen=True)
class ScheduleEntry:
    time: float              # s
    controls: dict           # well name -> WellControl (None shuts the well)


class Schedule:
    """Piecewise-constant well controls over time."""

    def __init__(self, entries):
        entries = sorted(entries, key=lambda e: e.time)
        for a, b in zip(entries, entries[1:]):
            if a.time == b.time:
                raise InputError(f"duplicate schedule time {a.time}")
        self.entries = entries

    def event_times(self):
        return [e.time for e in self.entries]

    def active_controls(self, t):
        """Controls in force at time t: per well, the latest entry at or
        before t wins; wells not yet mentioned are shut (None)."""
        active = {}
        for e in self.entries:
            if e.time > t + 1e-9:
                break
            active.update(e.controls)
        return active


def rate_of_kind(rates, kind):
    """Pick the named surface rate out of a per-well rate report."""
    if kind == "orat":
        return rates["oil"]
    if kind == "wrat":
        return rates["water"]
    if kind == "lrat":
        return rates["oil"] + rates["water"]
    if kind == "rate":
        return rates["injected"]
    raise InputError(f"unknown rate kind {kind!r}")


def apply_limit_switches(wells, controls, bhp_values, surface_rates):
    """One round of constraint switching after a converged step.

    Returns (new_controls, events). A rate well whose solved p_h crosses its
    BHP limit flips to BHP control at the limit and carries its old target as
    the new rate limit; a BHP well whose limited rate overshoots flips to
    rate control at that limit and keeps the old p_h as its BHP limit. The
    caller re-solves the step after any switch.
    """
    new = dict(controls)
    events = []
    for well in wells:
        c = controls.get(well.name)
        if c is None:
            continue
        if c.mode == "rate" and c.bhp_limit is not None:
            ph = bhp_values[well.name]
            violated = (ph < c.bhp_limit - 1e-9 if well.kind == "producer"
                        else ph > c.bhp_limit + 1e-9)
            if violated:
                new[well.name] = WellControl(
                    mode="bhp", value=c.bhp_limit,
                    rate_limit=c.value, rate_limit_kind=c.kind)
                events.append((well.name, "rate->bhp", c.bhp_limit))
        elif c.mode == "bhp" and c.rate_limit is not None:
            rate = rate_of_kind(surface_rates[well.name], c.rate_limit_kind)
            if rate > c.rate_limit * (1.0 + 1e-9):
                new[well.name] = WellControl(
                    mode="rate", value=c.rate_limit, kind=c.rate_limit_kind,
                    bhp_limit=c.value)
                events.append((well.name, "bhp->rate", c.rate_limit))
    return new, events
