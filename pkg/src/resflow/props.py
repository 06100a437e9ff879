"""Rock and fluid property tables: relative permeability, capillary, PVT.

Every table lookup is piecewise linear, clamped to the end values outside the
node range (with zero slope there), except that pressures below an oil or gas
table minimum raise OutOfRangeError. Each evaluation has a slope companion so
Jacobian assembly stays exactly consistent with the residual.

Internally SI throughout: Pa, Pa*s, m^3/m^3. Saturation functions are
dimensionless. rho_o at reservoir conditions folds in dissolved gas:
rho_o = (rho_o_std + R_s * rho_g_std) / B_o.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .errors import InputError, OutOfRangeError


def _interp(xs, ys, x):
    return np.interp(x, xs, ys)


def _interp_slope(xs, ys, x):
    """Value and right-continuous segment slope, zero outside the range."""
    x = np.asarray(x, dtype=float)
    idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    slope = (ys[idx + 1] - ys[idx]) / (xs[idx + 1] - xs[idx])
    slope = np.where((x < xs[0]) | (x > xs[-1]), 0.0, slope)
    return np.interp(x, xs, ys), slope


def _column(vals, name, n=None):
    a = np.asarray(vals, dtype=float).ravel()
    if n is not None and a.size != n:
        raise InputError(f"{name} must have {n} entries, got {a.size}")
    return a


# ---------------------------------------------------------------------------
# Relative permeability / capillary pressure
# ---------------------------------------------------------------------------

@dataclass
class RelPermTable:
    """Water-oil (and optionally gas-oil) saturation function tables.

    sw rows: (S_w, k_rw, k_row, P_cow); sg rows: (S_g, k_rg, k_rog, P_cog),
    both with strictly increasing saturation nodes. P_c in Pa. When the
    gas-oil table is present the endpoints must agree for Stone II:
    k_rog(S_g=0) == k_row(S_wc) == k_rocw.
    """

    sw: np.ndarray
    krw: np.ndarray
    krow: np.ndarray
    pcow: np.ndarray
    sg: np.ndarray = None
    krg: np.ndarray = None
    krog: np.ndarray = None
    pcog: np.ndarray = None

    def __post_init__(self):
        n = len(self.sw)
        self.sw = _column(self.sw, "sw")
        self.krw = _column(self.krw, "krw", n)
        self.krow = _column(self.krow, "krow", n)
        self.pcow = _column(self.pcow, "pcow", n)
        if self.sg is not None:
            m = len(self.sg)
            self.sg = _column(self.sg, "sg")
            self.krg = _column(self.krg, "krg", m)
            self.krog = _column(self.krog, "krog", m)
            self.pcog = _column(self.pcog, "pcog", m)
        self.validate()

    @property
    def has_gas(self):
        return self.sg is not None

    @property
    def swc(self):
        """Connate water: largest S_w with k_rw == 0."""
        zero = np.nonzero(self.krw == 0.0)[0]
        return float(self.sw[zero[-1]]) if zero.size else float(self.sw[0])

    @property
    def sor(self):
        """Residual oil to water: k_row vanishes for S_w >= 1 - sor."""
        zero = np.nonzero(self.krow == 0.0)[0]
        return 1.0 - float(self.sw[zero[0]]) if zero.size else 0.0

    @property
    def krocw(self):
        """k_ro at connate water and zero gas."""
        return float(np.interp(self.swc, self.sw, self.krow))

    def validate(self):
        def increasing(a, name):
            if np.any(np.diff(a) <= 0):
                raise InputError(f"{name} nodes must be strictly increasing")

        def in_unit(a, name):
            if np.any(a < 0) or np.any(a > 1):
                raise InputError(f"{name} values must lie in [0, 1]")

        increasing(self.sw, "sw")
        in_unit(self.sw, "sw")
        in_unit(self.krw, "krw")
        in_unit(self.krow, "krow")
        if np.any(np.diff(self.krw) < 0):
            raise InputError("krw must be nondecreasing in sw")
        if np.any(np.diff(self.krow) > 0):
            raise InputError("krow must be nonincreasing in sw")
        if np.any(np.diff(self.pcow) > 0):
            raise InputError("pcow must be nonincreasing in sw")
        if self.has_gas:
            increasing(self.sg, "sg")
            in_unit(self.sg, "sg")
            in_unit(self.krg, "krg")
            in_unit(self.krog, "krog")
            if np.any(np.diff(self.krg) < 0):
                raise InputError("krg must be nondecreasing in sg")
            if np.any(np.diff(self.krog) > 0):
                raise InputError("krog must be nonincreasing in sg")
            if np.any(np.diff(self.pcog) < 0):
                raise InputError("pcog must be nondecreasing in sg")
            if self.sg[0] != 0.0:
                raise InputError("gas table must start at sg = 0")
            if abs(self.krog[0] - self.krocw) > 1e-12:
                raise InputError(
                    "krog(0) must equal krow(swc) for the three-phase model, "
                    f"got {self.krog[0]} vs {self.krocw}")


def eval_water_oil(table, sw):
    """(k_rw, k_row, P_cow) at S_w, clamped to the table range."""
    return (_interp(table.sw, table.krw, sw),
            _interp(table.sw, table.krow, sw),
            _interp(table.sw, table.pcow, sw))


def eval_water_oil_slopes(table, sw):
    krw, dkrw = _interp_slope(table.sw, table.krw, sw)
    krow, dkrow = _interp_slope(table.sw, table.krow, sw)
    pcow, dpcow = _interp_slope(table.sw, table.pcow, sw)
    return krw, dkrw, krow, dkrow, pcow, dpcow


def eval_gas_oil(table, sg):
    """(k_rg, k_rog, P_cog) at S_g."""
    if not table.has_gas:
        raise InputError("table has no gas-oil data")
    return (_interp(table.sg, table.krg, sg),
            _interp(table.sg, table.krog, sg),
            _interp(table.sg, table.pcog, sg))


def eval_gas_oil_slopes(table, sg):
    if not table.has_gas:
        raise InputError("table has no gas-oil data")
    krg, dkrg = _interp_slope(table.sg, table.krg, sg)
    krog, dkrog = _interp_slope(table.sg, table.krog, sg)
    pcog, dpcog = _interp_slope(table.sg, table.pcog, sg)
    return krg, dkrg, krog, dkrog, pcog, dpcog


def stone2_kro(krw, krow, krg, krog, krocw):
    """Three-phase oil relperm, normalized Stone II, clamped below at zero.

    k_ro = k_rocw * [(k_row/k_rocw + k_rw) * (k_rog/k_rocw + k_rg)
                     - (k_rw + k_rg)]
    """
    raw = krocw * ((krow / krocw + krw) * (krog / krocw + krg) - (krw + krg))
    return np.maximum(raw, 0.0)


def stone2_kro_derivs(krw, krow, krg, krog, krocw):
    """k_ro plus partials w.r.t. each input relperm (zero where clamped)."""
    a = krow / krocw + krw
    b = krog / krocw + krg
    raw = krocw * (a * b - (krw + krg))
    live = raw > 0.0
    d_krw = np.where(live, krocw * (b - 1.0), 0.0)
    d_krow = np.where(live, b, 0.0)
    d_krg = np.where(live, krocw * (a - 1.0), 0.0)
    d_krog = np.where(live, a, 0.0)
    return np.maximum(raw, 0.0), d_krw, d_krow, d_krg, d_krog


# ---------------------------------------------------------------------------
# PVT
# ---------------------------------------------------------------------------

@dataclass
class PvtTable:
    """Black-oil PVT: saturated-oil table, analytic water, gas table.

    Oil rows (po, bo, muo, rs) describe the SATURATED branch; po strictly
    increasing, rs nondecreasing. Undersaturated oil (p > p_b) extends from
    the bubble point with the constant slopes dbo_dp (<= 0) and dmuo_dp
    (>= 0) while R_s stays frozen at R_s(p_b). Two-phase decks use the table
    as a dead-oil curve (rs must be all zero) and never take the
    undersaturated branch.

    Water: B_w = bw_ref * exp(-cw * (p - pw_ref)), constant viscosity.
    Gas (optional): table rows (pg, bg, mug).
    """

    po: np.ndarray
    bo: np.ndarray
    muo: np.ndarray
    rs: np.ndarray
    bw_ref: float
    cw: float
    pw_ref: float
    muw: float
    rho_o_std: float
    rho_w_std: float
    rho_g_std: float = 0.0
    dbo_dp_usat: float = 0.0
    dmuo_dp_usat: float = 0.0
    pg: np.ndarray = None
    bg: np.ndarray = None
    mug: np.ndarray = None

    def __post_init__(self):
        n = len(self.po)
        self.po = _column(self.po, "po")
        self.bo = _column(self.bo, "bo", n)
        self.muo = _column(self.muo, "muo", n)
        self.rs = _column(self.rs, "rs", n)
        if self.pg is not None:
            m = len(self.pg)
            self.pg = _column(self.pg, "pg")
            self.bg = _column(self.bg, "bg", m)
            self.mug = _column(self.mug, "mug", m)
        self.validate()

    @property
    def has_gas(self):
        return self.pg is not None

    def validate(self):
        if np.any(np.diff(self.po) <= 0):
            raise InputError("oil table pressures must be strictly increasing")
        if np.any(self.bo <= 0) or np.any(self.muo <= 0):
            raise InputError("bo and muo must be positive")
        if np.any(self.rs < 0) or np.any(np.diff(self.rs) < 0):
            raise InputError("rs must be nonnegative and nondecreasing")
        if self.dbo_dp_usat > 0:
            raise InputError("undersaturated dbo_dp must be <= 0")
        if self.dmuo_dp_usat < 0:
            raise InputError("undersaturated dmuo_dp must be >= 0")
        if self.bw_ref <= 0 or self.muw <= 0 or self.cw < 0:
            raise InputError("water pvt values out of range")
        if self.has_gas:
            if np.any(np.diff(self.pg) <= 0):
                raise InputError("gas table pressures must be strictly increasing")
            if np.any(self.bg <= 0) or np.any(self.mug <= 0):
                raise InputError("bg and mug must be positive")

    def check_range(self, p, what="pressure"):
        p = np.asarray(p)
        if np.any(p < self.po[0]):
            raise OutOfRangeError(
                f"{what} {p.min():.6g} Pa below oil table minimum {self.po[0]:.6g} Pa")


def eval_pvt_water(pvt, p):
    """(B_w, mu_w, rho_w) at pressure p."""
    bw = pvt.bw_ref * np.exp(-pvt.cw * (np.asarray(p, dtype=float) - pvt.pw_ref))
    return bw, np.full_like(bw, pvt.muw), pvt.rho_w_std / bw


def eval_pvt_gas(pvt, p):
    """(B_g, mu_g, rho_g) at pressure p."""
    if not pvt.has_gas:
        raise InputError("pvt has no gas table")
    p = np.asarray(p, dtype=float)
    if np.any(p < pvt.pg[0]):
        raise OutOfRangeError(
            f"pressure {p.min():.6g} Pa below gas table minimum {pvt.pg[0]:.6g} Pa")
    bg = _interp(pvt.pg, pvt.bg, p)
    mug = _interp(pvt.pg, pvt.mug, p)
    return bg, mug, pvt.rho_g_std / bg


def eval_pvt_oil(pvt, p, pb):
    """(B_o, mu_o, R_s, rho_o) at pressure p and bubble point pb.

    Saturated when p <= pb (evaluated at p); undersaturated when p > pb
    (bubble-point values plus the constant-slope extension).
    """
    pvt.check_range(p)
    pvt.check_range(pb, "bubble point")
    p = np.asarray(p, dtype=float)
    sat = p <= np.asarray(pb, dtype=float)
    props = oil_properties(pvt, p, np.where(sat, p, pb), sat)
    return props.bo, props.muo, props.rs, props.rho


def oil_properties(pvt, p, pb, saturated):
    """Vectorized oil-property bundle with partials w.r.t. p and p_b.

    For saturated cells pb is ignored (the branch runs along the table at p,
    all pb-partials zero). For undersaturated cells the p-partials carry only
    the extension slopes and the pb-partials the table slopes at pb.
    """
    p = np.asarray(p, dtype=float)
    pb = np.asarray(pb, dtype=float)
    saturated = np.asarray(saturated, dtype=bool)
    pvt.check_range(p)
    pvt.check_range(np.where(saturated, p, pb), "bubble point")

    peval = np.where(saturated, p, pb)
    bo_s, dbo_s = _interp_slope(pvt.po, pvt.bo, peval)
    muo_s, dmuo_s = _interp_slope(pvt.po, pvt.muo, peval)
    rs, drs = _interp_slope(pvt.po, pvt.rs, peval)

    dp = np.where(saturated, 0.0, p - pb)
    bo = bo_s + pvt.dbo_dp_usat * dp
    muo = muo_s + pvt.dmuo_dp_usat * dp
    dbo_dp = np.where(saturated, dbo_s, pvt.dbo_dp_usat)
    dbo_dpb = np.where(saturated, 0.0, dbo_s - pvt.dbo_dp_usat)
    dmuo_dp = np.where(saturated, dmuo_s, pvt.dmuo_dp_usat)
    dmuo_dpb = np.where(saturated, 0.0, dmuo_s - pvt.dmuo_dp_usat)
    drs_dp = np.where(saturated, drs, 0.0)
    drs_dpb = np.where(saturated, 0.0, drs)

    mass = pvt.rho_o_std + rs * pvt.rho_g_std
    rho = mass / bo
    drho_dp = (drs_dp * pvt.rho_g_std - rho * dbo_dp) / bo
    drho_dpb = (drs_dpb * pvt.rho_g_std - rho * dbo_dpb) / bo
    return SimpleNamespace(
        bo=bo, dbo_dp=dbo_dp, dbo_dpb=dbo_dpb,
        muo=muo, dmuo_dp=dmuo_dp, dmuo_dpb=dmuo_dpb,
        rs=rs, drs_dp=drs_dp, drs_dpb=drs_dpb,
        rho=rho, drho_dp=drho_dp, drho_dpb=drho_dpb)


def water_properties(pvt, p):
    p = np.asarray(p, dtype=float)
    bw = pvt.bw_ref * np.exp(-pvt.cw * (p - pvt.pw_ref))
    dbw = -pvt.cw * bw
    rho = pvt.rho_w_std / bw
    drho = -pvt.rho_w_std * dbw / (bw * bw)
    return SimpleNamespace(bw=bw, dbw_dp=dbw, muw=pvt.muw, rho=rho, drho_dp=drho)


def gas_properties(pvt, p):
    p = np.asarray(p, dtype=float)
    if np.any(p < pvt.pg[0]):
        raise OutOfRangeError(
            f"pressure {p.min():.6g} Pa below gas table minimum {pvt.pg[0]:.6g} Pa")
    bg, dbg = _interp_slope(pvt.pg, pvt.bg, p)
    mug, dmug = _interp_slope(pvt.pg, pvt.mug, p)
    rho = pvt.rho_g_std / bg
    drho = -pvt.rho_g_std * dbg / (bg * bg)
    return SimpleNamespace(bg=bg, dbg_dp=dbg, mug=mug, dmug_dp=dmug,
                           rho=rho, drho_dp=drho)


@dataclass
class FluidSystem:
    """Model mode plus the tables it needs.

    mode "two-phase" solves oil-water with unknowns (p_o, S_w); "black-oil"
    adds the gas component with the switching third unknown.
    """

    mode: str
    relperm: RelPermTable
    pvt: PvtTable

    def __post_init__(self):
        if self.mode not in ("two-phase", "black-oil"):
            raise InputError(f"unknown fluid mode {self.mode!r}")
        if self.mode == "black-oil":
            if not self.relperm.has_gas:
                raise InputError("black-oil mode needs a gas-oil relperm table")
            if not self.pvt.has_gas:
                raise InputError("black-oil mode needs a gas pvt table")
        else:
            if np.any(self.pvt.rs != 0.0):
                raise InputError("two-phase decks must use a dead-oil table (rs = 0)")

    @property
    def num_phases(self):
        return 3 if self.mode == "black-oil" else 2


def relperm_properties(fluid, sw, sg=None):
    """Vectorized relperm/capillary bundle with saturation partials."""
    t = fluid.relperm
    krw, dkrw, krow, dkrow, pcow, dpcow = eval_water_oil_slopes(t, sw)
    if fluid.mode == "two-phase":
        return SimpleNamespace(
            krw=krw, dkrw_dsw=dkrw,
            kro=krow, dkro_dsw=dkrow, dkro_dsg=np.zeros_like(krw),
            pcow=pcow, dpcow_dsw=dpcow)
    krg, dkrg, krog, dkrog, pcog, dpcog = eval_gas_oil_slopes(t, sg)
    kro, d_krw, d_krow, d_krg, d_krog = stone2_kro_derivs(
        krw, krow, krg, krog, t.krocw)
    return SimpleNamespace(
        krw=krw, dkrw_dsw=dkrw,
        kro=kro,
        dkro_dsw=d_krw * dkrw + d_krow * dkrow,
        dkro_dsg=d_krg * dkrg + d_krog * dkrog,
        krg=krg, dkrg_dsg=dkrg,
        pcow=pcow, dpcow_dsw=dpcow,
        pcog=pcog, dpcog_dsg=dpcog)
