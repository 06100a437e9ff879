"""Keyword input decks: tokenizer, parser, and serializer.

The grammar is Eclipse-flavored but owned by this repo and intentionally
small. A deck is a sequence of keywords; each keyword is followed by a
payload terminated with `/`. `--` starts a comment. Numeric arrays support
`N*value` repeats and INCLUDE splicing. Record keywords (WELSPECS, COMPDAT,
WCONPROD, WCONINJE) take one record per `/` and end at an empty record.

Decks use field units: psi, ft, mD, cP, lb/ft3, STB/day, MSCF/day, days.
Values are stored in the SimDeck exactly as written (field units), so
parse -> serialize -> parse is an identity; unit conversion happens when a
simulation is built from the deck.

Keywords
--------
grid        DIMENS, DX, DY, DZ, TOPS
properties  PORO, PERMX, PERMY, PERMZ, ROCKC (cr_1/psi p_ref_psi)
fluids      TWOPHASE | BLACKOIL, SWOF, SGOF, PVTW (p_ref bw cw muw),
            PVTO (p bo muo rs per row), UNDERSAT (dbo_dp dmuo_dp),
            PVDG (p bg mug per row), DENSITY (oil water gas lb/ft3)
dual        DUALPORO, DUALPERM, SIGMA (1/ft2), BLOCKDIMS (lx ly lz ft),
            POROF, PERMF
initial     PRESSURE, SWAT, SGAS, PBUB
wells       WELSPECS (name PROD|INJ depth [WATER|GAS]),
            COMPDAT (well i j k1 k2 rw skin),
            WCONPROD (well ORAT|WRAT|LRAT|BHP value [limit...]),
            WCONINJE (well RATE|BHP value [limit...]), TIME (day)
time        TSTEP (report lengths, days) or ENDTIME (day)
control     SOLVER, NEWTON, PRECOND, WORKERS, DTCONF (dt_init dt_min dt_max)
other       INCLUDE 'file' (spliced by the tokenizer)
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DeckError

_TOKEN_RE = re.compile(r"'[^']*'|\"[^\"]*\"|/|[^\s/]+")

ARRAY_KEYWORDS = {"DX", "DY", "DZ", "TOPS", "PORO", "PERMX", "PERMY",
                  "PERMZ", "POROF", "PERMF", "PRESSURE", "SWAT", "SGAS",
                  "PBUB", "TSTEP"}
TABLE_KEYWORDS = {"SWOF": 4, "SGOF": 4, "PVTO": 4, "PVDG": 3}
FLAG_KEYWORDS = {"TWOPHASE", "BLACKOIL", "DUALPORO", "DUALPERM"}
RECORD_KEYWORDS = {"WELSPECS", "COMPDAT", "WCONPROD", "WCONINJE"}
SCALAR_KEYWORDS = {"DIMENS": 3, "ROCKC": 2, "PVTW": 4, "UNDERSAT": 2,
                   "DENSITY": 3, "SIGMA": 1, "BLOCKDIMS": 3, "TIME": 1,
                   "ENDTIME": 1, "WORKERS": 1, "DTCONF": 3}
TOKEN_KEYWORDS = {"SOLVER", "NEWTON", "PRECOND"}

KNOWN = (ARRAY_KEYWORDS | set(TABLE_KEYWORDS) | FLAG_KEYWORDS
         | RECORD_KEYWORDS | set(SCALAR_KEYWORDS) | TOKEN_KEYWORDS)


@dataclass
class _Token:
    text: str
    line: int
    col: int
    path: str


def _tokenize_text(text, path):
    toks = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("--", 1)[0]
        for m in _TOKEN_RE.finditer(line):
            toks.append(_Token(m.group(0), ln, m.start() + 1, path))
    return toks


def _tokenize(text, path, base_dir, depth=0):
    """Token stream with INCLUDE directives spliced in place."""
    if depth > 16:
        raise DeckError("INCLUDE nesting too deep (cycle?)", path=path)
    raw = _tokenize_text(text, path)
    out = []
    i = 0
    while i < len(raw):
        t = raw[i]
        if t.text.upper() == "INCLUDE":
            if i + 1 >= len(raw):
                raise DeckError("INCLUDE needs a file name", t.line, t.col, path)
            fn = raw[i + 1].text.strip("'\"")
            i += 2
            if i < len(raw) and raw[i].text == "/":
                i += 1
            fpath = Path(base_dir) / fn
            if not fpath.exists():
                raise DeckError(f"INCLUDE file not found: {fn}",
                                raw[i - 2].line, raw[i - 2].col, path)
            out.extend(_tokenize(fpath.read_text(), str(fpath),
                                 fpath.parent, depth + 1))
        else:
            out.append(t)
            i += 1
    return out


class _Cursor:
    def __init__(self, tokens, path):
        self.tokens = tokens
        self.pos = 0
        self.path = path

    def at_end(self):
        return self.pos >= len(self.tokens)

    def peek(self):
        return None if self.at_end() else self.tokens[self.pos]

    def next(self, what="token"):
        if self.at_end():
            last = self.tokens[-1] if self.tokens else None
            raise DeckError(f"unexpected end of deck, wanted {what}",
                            last.line if last else 0, 0, self.path)
        t = self.tokens[self.pos]
        self.pos += 1
        return t


def _as_number(tok, path):
    try:
        v = float(tok.text)
    except ValueError:
        raise DeckError(f"malformed number {tok.text!r}",
                        tok.line, tok.col, path) from None
    return v


def _read_numbers(cur, keyword):
    """Numeric payload until `/`, expanding N*value repeats."""
    vals = []
    while True:
        t = cur.next(f"number or / for {keyword}")
        if t.text == "/":
            return vals
        if "*" in t.text:
            cnt, _, rest = t.text.partition("*")
            try:
                n = int(cnt)
                v = float(rest)
            except ValueError:
                raise DeckError(f"malformed repeat {t.text!r}",
                                t.line, t.col, cur.path) from None
            if n < 1:
                raise DeckError(f"repeat count must be >= 1 in {t.text!r}",
                                t.line, t.col, cur.path)
            vals.extend([v] * n)
        else:
            vals.append(_as_number(t, cur.path))


def _read_records(cur, keyword):
    """Records each ending with `/`; an empty record closes the keyword."""
    records = []
    while True:
        rec = []
        while True:
            t = cur.next(f"record field or / in {keyword}")
            if t.text == "/":
                break
            rec.append(t)
        if not rec:
            return records
        records.append(rec)


def _read_tokens(cur, keyword):
    out = []
    while True:
        t = cur.next(f"value or / for {keyword}")
        if t.text == "/":
            return out
        out.append(t)


@dataclass
class SimDeck:
    """Parsed deck contents, field units, exactly as written."""

    dimens: tuple = None
    dx: list = None
    dy: list = None
    dz: list = None
    tops: list = None
    poro: list = None
    permx: list = None
    permy: list = None
    permz: list = None
    rockc: tuple = None
    mode: str = None
    swof: list = None
    sgof: list = None
    pvtw: tuple = None
    pvto: list = None
    undersat: tuple = None
    pvdg: list = None
    density: tuple = None
    dualporo: bool = False
    dualperm: bool = False
    sigma: float = None
    blockdims: tuple = None
    porof: list = None
    permf: list = None
    pressure: list = None
    swat: list = None
    sgas: list = None
    pbub: list = None
    welspecs: list = field(default_factory=list)
    compdat: list = field(default_factory=list)
    schedule: list = field(default_factory=list)
    tstep: list = None
    endtime: float = None
    solver: tuple = None
    newton: tuple = None
    precond: tuple = None
    workers: int = None
    dtconf: tuple = None

    @property
    def num_cells(self):
        return self.dimens[0] * self.dimens[1] * self.dimens[2]


def _check_array_len(deck, kw, vals, tok, path):
    if deck.dimens is None:
        raise DeckError(f"{kw} before DIMENS", tok.line, tok.col, path)
    nx, ny, nz = deck.dimens
    ng = deck.num_cells
    ok = {"DX": {1, nx, ng}, "DY": {1, ny, ng}, "DZ": {1, nz, ng},
          "TOPS": {1, nx * ny}}.get(kw, {1, ng})
    if len(vals) not in ok:
        raise DeckError(
            f"{kw} has {len(vals)} values, expected one of {sorted(ok)}",
            tok.line, tok.col, path)


def _parse_welspecs(recs, path):
    out = []
    for rec in recs:
        if len(rec) not in (3, 4):
            raise DeckError("WELSPECS record needs: name PROD|INJ depth "
                            "[WATER|GAS]", rec[0].line, rec[0].col, path)
        name = rec[0].text.strip("'\"")
        kind = rec[1].text.upper()
        if kind not in ("PROD", "INJ"):
            raise DeckError(f"well kind must be PROD or INJ, got {rec[1].text!r}",
                            rec[1].line, rec[1].col, path)
        depth = _as_number(rec[2], path)
        phase = None
        if len(rec) == 4:
            phase = rec[3].text.upper()
            if phase not in ("WATER", "GAS"):
                raise DeckError(f"injection phase must be WATER or GAS",
                                rec[3].line, rec[3].col, path)
        if kind == "INJ" and phase is None:
            raise DeckError(f"injector {name!r} needs an injection phase",
                            rec[0].line, rec[0].col, path)
        if kind == "PROD" and phase is not None:
            raise DeckError(f"producer {name!r} takes no injection phase",
                            rec[3].line, rec[3].col, path)
        out.append((name, kind, depth, phase))
    return out


def _parse_compdat(recs, deck, path):
    out = []
    for rec in recs:
        if len(rec) != 7:
            raise DeckError("COMPDAT record needs: well i j k1 k2 rw skin",
                            rec[0].line, rec[0].col, path)
        name = rec[0].text.strip("'\"")
        nums = [_as_number(t, path) for t in rec[1:]]
        i, j, k1, k2 = (int(v) for v in nums[:4])
        if deck.dimens is not None:
            nx, ny, nz = deck.dimens
            if not (1 <= i <= nx and 1 <= j <= ny
                    and 1 <= k1 <= k2 <= nz):
                raise DeckError(
                    f"COMPDAT cell ({i},{j},{k1}-{k2}) outside "
                    f"{nx}x{ny}x{nz} grid", rec[1].line, rec[1].col, path)
        out.append((name, i, j, k1, k2, nums[4], nums[5]))
    return out


_PROD_MODES = ("ORAT", "WRAT", "LRAT", "BHP")
_RATE_KIND_WORDS = ("ORAT", "WRAT", "LRAT", "RATE")


def _parse_wcon(recs, kw, path):
    out = []
    for rec in recs:
        if len(rec) < 3:
            raise DeckError(f"{kw} record needs: well mode value [limit]",
                            rec[0].line, rec[0].col, path)
        name = rec[0].text.strip("'\"")
        mode = rec[1].text.upper()
        modes = _PROD_MODES if kw == "WCONPROD" else ("RATE", "BHP")
        if mode not in modes:
            raise DeckError(f"{kw} mode must be one of {modes}",
                            rec[1].line, rec[1].col, path)
        value = _as_number(rec[2], path)
        parsed = [kw, name, mode, value]
        rest = rec[3:]
        if mode != "BHP":
            if len(rest) > 1:
                raise DeckError(f"{kw} rate record takes one optional BHP "
                                "limit", rest[1].line, rest[1].col, path)
            if rest:
                parsed.append(_as_number(rest[0], path))
        else:
            if rest and kw == "WCONPROD":
                if len(rest) != 2 or rest[0].text.upper() not in _RATE_KIND_WORDS:
                    raise DeckError(
                        "WCONPROD BHP limit is: ORAT|WRAT|LRAT value",
                        rest[0].line, rest[0].col, path)
                parsed.extend([rest[0].text.upper(), _as_number(rest[1], path)])
            elif rest:
                if len(rest) > 1:
                    raise DeckError("WCONINJE BHP record takes one optional "
                                    "rate limit", rest[1].line, rest[1].col, path)
                parsed.append(_as_number(rest[0], path))
        out.append(tuple(parsed))
    return out


def parse_deck(text, path="<deck>", base_dir="."):
    """Parse deck text into a SimDeck; raises DeckError with line/column."""
    cur = _Cursor(_tokenize(text, path, base_dir), path)
    deck = SimDeck()
    sched_time = 0.0
    sched = {}

    def sched_append(records):
        sched.setdefault(sched_time, []).extend(records)

    while not cur.at_end():
        tok = cur.next()
        kw = tok.text.upper()
        if kw not in KNOWN:
            raise DeckError(f"unknown keyword {tok.text!r}",
                            tok.line, tok.col, cur.path)
        if kw in FLAG_KEYWORDS:
            nxt = cur.peek()
            if nxt is not None and nxt.text == "/":
                cur.next()
            if kw == "TWOPHASE":
                deck.mode = "two-phase"
            elif kw == "BLACKOIL":
                deck.mode = "black-oil"
            elif kw == "DUALPORO":
                deck.dualporo = True
            else:
                deck.dualperm = True
            continue
        if kw in ARRAY_KEYWORDS:
            vals = _read_numbers(cur, kw)
            if not vals:
                raise DeckError(f"{kw} has an empty payload",
                                tok.line, tok.col, cur.path)
            if kw == "TSTEP":
                deck.tstep = (deck.tstep or []) + vals
            else:
                _check_array_len(deck, kw, vals, tok, cur.path)
                setattr(deck, kw.lower(), vals)
            continue
        if kw in TABLE_KEYWORDS:
            ncol = TABLE_KEYWORDS[kw]
            vals = _read_numbers(cur, kw)
            if not vals or len(vals) % ncol:
                raise DeckError(
                    f"{kw} needs rows of {ncol} values, got {len(vals)}",
                    tok.line, tok.col, cur.path)
            rows = [vals[i:i + ncol] for i in range(0, len(vals), ncol)]
            setattr(deck, kw.lower(), rows)
            continue
        if kw in SCALAR_KEYWORDS:
            want = SCALAR_KEYWORDS[kw]
            vals = _read_numbers(cur, kw)
            if len(vals) != want:
                raise DeckError(f"{kw} needs {want} value(s), got {len(vals)}",
                                tok.line, tok.col, cur.path)
            if kw == "DIMENS":
                deck.dimens = tuple(int(v) for v in vals)
                if min(deck.dimens) < 1:
                    raise DeckError("DIMENS entries must be >= 1",
                                    tok.line, tok.col, cur.path)
            elif kw == "TIME":
                if vals[0] < sched_time:
                    raise DeckError("TIME must not decrease",
                                    tok.line, tok.col, cur.path)
                sched_time = vals[0]
            elif kw == "ENDTIME":
                deck.endtime = vals[0]
            elif kw == "WORKERS":
                deck.workers = int(vals[0])
            elif kw == "SIGMA":
                deck.sigma = vals[0]
            else:
                setattr(deck, kw.lower(), tuple(vals))
            continue
        if kw in TOKEN_KEYWORDS:
            toks = _read_tokens(cur, kw)
            setattr(deck, kw.lower(), tuple(t.text for t in toks))
            continue
        # record keywords
        recs = _read_records(cur, kw)
        if kw == "WELSPECS":
            deck.welspecs.extend(_parse_welspecs(recs, cur.path))
        elif kw == "COMPDAT":
            deck.compdat.extend(_parse_compdat(recs, deck, cur.path))
        else:
            sched_append(_parse_wcon(recs, kw, cur.path))

    deck.schedule = sorted((t, rs) for t, rs in sched.items())
    _validate_deck(deck, path)
    return deck


def read_deck(path):
    p = Path(path)
    if not p.exists():
        raise DeckError(f"deck file not found: {path}")
    return parse_deck(p.read_text(), str(p), p.parent)


def _validate_deck(deck, path):
    need = ["dimens", "dx", "dy", "dz", "poro", "permx", "permy", "permz",
            "mode", "swof", "pvtw", "pvto", "density", "pressure", "swat"]
    for f in need:
        if getattr(deck, f) in (None, []):
            raise DeckError(f"deck is missing {f.upper()}", path=path)
    if deck.mode == "black-oil":
        for f in ("sgof", "pvdg"):
            if getattr(deck, f) is None:
                raise DeckError(f"black-oil deck needs {f.upper()}", path=path)
    if deck.dualporo and (deck.porof is None or deck.permf is None):
        raise DeckError("DUALPORO needs POROF and PERMF", path=path)
    if deck.dualporo and deck.sigma is None and deck.blockdims is None:
        raise DeckError("DUALPORO needs SIGMA or BLOCKDIMS", path=path)
    if deck.tstep is None and deck.endtime is None:
        raise DeckError("deck needs TSTEP or ENDTIME", path=path)
    names = {w[0] for w in deck.welspecs}
    for rec in deck.compdat:
        if rec[0] not in names:
            raise DeckError(f"COMPDAT references unknown well {rec[0]!r}",
                            path=path)
    for _, recs in deck.schedule:
        for rec in recs:
            if rec[1] not in names:
                raise DeckError(f"{rec[0]} references unknown well {rec[1]!r}",
                                path=path)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return str(int(v)) + ".0"
    return repr(v) if isinstance(v, float) else str(v)


def _emit_array(lines, kw, vals, per_line=8):
    lines.append(kw)
    for i in range(0, len(vals), per_line):
        lines.append("  " + " ".join(_fmt(v) for v in vals[i:i + per_line]))
    lines.append("/")


def _emit_table(lines, kw, rows):
    lines.append(kw)
    for row in rows:
        lines.append("  " + " ".join(_fmt(v) for v in row))
    lines.append("/")


def serialize_deck(deck):
    """Deck text whose parse equals this SimDeck."""
    L = []
    L.append("DIMENS " + " ".join(str(v) for v in deck.dimens) + " /")
    for kw in ("dx", "dy", "dz", "tops", "poro", "permx", "permy", "permz"):
        vals = getattr(deck, kw)
        if vals is not None:
            _emit_array(L, kw.upper(), vals)
    if deck.rockc is not None:
        L.append("ROCKC " + " ".join(_fmt(v) for v in deck.rockc) + " /")
    L.append("TWOPHASE /" if deck.mode == "two-phase" else "BLACKOIL /")
    _emit_table(L, "SWOF", deck.swof)
    if deck.sgof is not None:
        _emit_table(L, "SGOF", deck.sgof)
    L.append("PVTW " + " ".join(_fmt(v) for v in deck.pvtw) + " /")
    _emit_table(L, "PVTO", deck.pvto)
    if deck.undersat is not None:
        L.append("UNDERSAT " + " ".join(_fmt(v) for v in deck.undersat) + " /")
    if deck.pvdg is not None:
        _emit_table(L, "PVDG", deck.pvdg)
    L.append("DENSITY " + " ".join(_fmt(v) for v in deck.density) + " /")
    if deck.dualporo:
        L.append("DUALPORO /")
        if deck.dualperm:
            L.append("DUALPERM /")
        if deck.sigma is not None:
            L.append("SIGMA " + _fmt(deck.sigma) + " /")
        if deck.blockdims is not None:
            L.append("BLOCKDIMS " + " ".join(_fmt(v) for v in deck.blockdims)
                     + " /")
        _emit_array(L, "POROF", deck.porof)
        _emit_array(L, "PERMF", deck.permf)
    for kw in ("pressure", "swat", "sgas", "pbub"):
        vals = getattr(deck, kw)
        if vals is not None:
            _emit_array(L, kw.upper(), vals)
    if deck.welspecs:
        L.append("WELSPECS")
        for name, kind, depth, phase in deck.welspecs:
            rec = f"  '{name}' {kind} {_fmt(depth)}"
            if phase:
                rec += " " + phase
            L.append(rec + " /")
        L.append("/")
    if deck.compdat:
        L.append("COMPDAT")
        for name, i, j, k1, k2, rw, skin in deck.compdat:
            L.append(f"  '{name}' {i} {j} {k1} {k2} {_fmt(rw)} {_fmt(skin)} /")
        L.append("/")
    for t, recs in deck.schedule:
        if t > 0:
            L.append("TIME " + _fmt(t) + " /")
        i = 0
        while i < len(recs):  # consecutive runs keep their original order
            kw = recs[i][0]
            L.append(kw)
            while i < len(recs) and recs[i][0] == kw:
                rec = recs[i]
                L.append(f"  '{rec[1]}' "
                         + " ".join(_fmt(v) for v in rec[2:]) + " /")
                i += 1
            L.append("/")
    if deck.tstep is not None:
        _emit_array(L, "TSTEP", deck.tstep)
    if deck.endtime is not None:
        L.append("ENDTIME " + _fmt(deck.endtime) + " /")
    for kw in ("solver", "newton", "precond"):
        toks = getattr(deck, kw)
        if toks is not None:
            L.append(kw.upper() + " " + " ".join(toks) + " /")
    if deck.workers is not None:
        L.append(f"WORKERS {deck.workers} /")
    if deck.dtconf is not None:
        L.append("DTCONF " + " ".join(_fmt(v) for v in deck.dtconf) + " /")
    return "\n".join(L) + "\n"
