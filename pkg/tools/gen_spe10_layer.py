#!/usr/bin/env python3
"""Generate the heterogeneous 60x220 layer include files in decks/include/.

The published SPE10 model-2 arrays are not redistributable, so the layer
decks ship a synthetic stand-in: a seeded log-normal permeability field with
meandering high-permeability channels, porosity correlated with log-perm,
and a handful of zero-porosity (inactive) cells. Permeability stays inside
the 6.65e-4 mD .. 2e4 mD span of the original data set and porosity inside
[0, 0.5]. Deterministic: rerunning reproduces the committed files bit for
bit.

Usage: python3 tools/gen_spe10_layer.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

NX, NY = 60, 220
SEED = 20100803


def _channel_boost(x_idx, y_idx, x0, amp, wavelength, phase, width):
    center = x0 + amp * np.sin(2 * np.pi * y_idx / wavelength + phase)
    d = x_idx - center
    return np.exp(-0.5 * (d / width) ** 2)


def make_fields():
    rng = np.random.default_rng(SEED)
    # smooth correlated background, elongated along y like fluvial bedding
    noise = rng.standard_normal((NY, NX))
    background = gaussian_filter(noise, sigma=(9.0, 3.0), mode="nearest")
    background /= background.std()

    yy, xx = np.mgrid[0:NY, 0:NX]
    channels = np.zeros((NY, NX))
    for x0, amp, wl, ph, w, gain in ((14.0, 7.0, 140.0, 0.3, 3.0, 2.2),
                                     (31.0, 9.0, 180.0, 2.1, 3.5, 2.6),
                                     (47.0, 6.0, 120.0, 4.4, 2.5, 2.0)):
        channels += gain * _channel_boost(xx, yy, x0, amp, wl, ph, w)

    log10k = 1.1 + 1.15 * background + channels   # log10(mD)
    log10k = np.clip(log10k, -2.0, 4.28)          # 0.01 mD .. ~1.9e4 mD
    permx = 10.0 ** log10k

    lo, hi = log10k.min(), log10k.max()
    poro = 0.04 + 0.44 * (log10k - lo) / (hi - lo)
    poro += 0.015 * gaussian_filter(rng.standard_normal((NY, NX)), 2.0)
    poro = np.clip(poro, 0.02, 0.5)

    # a few inactive cells, kept away from the five well locations
    flat = gaussian_filter(rng.standard_normal((NY, NX)), 1.5).ravel()
    order = np.argsort(flat)
    protected = np.zeros((NY, NX), dtype=bool)
    for ci, cj in ((0, 0), (NX - 1, 0), (0, NY - 1), (NX - 1, NY - 1),
                   (NX // 2, NY // 2)):
        protected[max(cj - 5, 0):cj + 6, max(ci - 5, 0):ci + 6] = True
    inactive = []
    for idx in order:
        j, i = divmod(idx, NX)
        if not protected[j, i]:
            inactive.append(idx)
        if len(inactive) == 15:
            break
    poro.ravel()[inactive] = 0.0

    # guarantee workable rock at the wells
    for ci, cj in ((0, 0), (NX - 1, 0), (0, NY - 1), (NX - 1, NY - 1),
                   (NX // 2, NY // 2)):
        sl = np.s_[max(cj - 1, 0):cj + 2, max(ci - 1, 0):ci + 2]
        permx[sl] = np.maximum(permx[sl], 200.0)
        poro[sl] = np.maximum(poro[sl], 0.17)

    return permx, poro


def write_array(path, keyword, values):
    lines = [keyword]
    vals = [f"{v:.6g}" for v in values]
    for i in range(0, len(vals), 6):
        lines.append("  " + " ".join(vals[i:i + 6]))
    lines.append("/")
    path.write_text("\n".join(lines) + "\n")


def main(outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    permx, poro = make_fields()
    # natural order: i fastest, then j
    kx = permx.ravel()          # (NY, NX) ravel walks x fastest per row
    ph = poro.ravel()
    write_array(outdir / "spe10_permx.inc", "PERMX", kx)
    write_array(outdir / "spe10_permy.inc", "PERMY", kx)
    write_array(outdir / "spe10_permz.inc", "PERMZ", 0.1 * kx)
    write_array(outdir / "spe10_poro.inc", "PORO", ph)
    print(f"perm mD: min {kx.min():.4g} max {kx.max():.4g} "
          f"median {np.median(kx):.4g}")
    print(f"poro: min {ph.min():.3g} max {ph.max():.3g} "
          f"inactive {(ph == 0).sum()}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else
         Path(__file__).resolve().parent.parent / "decks" / "include")
