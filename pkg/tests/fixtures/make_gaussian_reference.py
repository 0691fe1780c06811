"""Regenerate gaussian_reference.json with 40-digit mpmath values."""

import json
from pathlib import Path

import mpmath

mpmath.mp.dps = 40

xs = [-38.0, -20.0, -8.5, -5.0, -3.0, -1.96, -1.0, -0.3, -1e-8, 0.0, 1e-8, 0.3, 1.0, 1.96, 3.0, 5.0, 8.0]
us = [1e-300, 1e-100, 1e-12, 1e-6, 0.001, 0.025, 0.1, 0.3, 0.5, 0.7, 0.9, 0.975, 0.999, 1 - 1e-6]

cdf = [[x, mpmath.nstr(mpmath.ncdf(x), 30)] for x in xs]
quantile = [[u, mpmath.nstr(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(u) - 1), 30)]
            for u in us if u > 1e-12]
# erfinv loses accuracy next to 0; solve ncdf(z) = u directly there
for u in us:
    if u <= 1e-12:
        z = mpmath.findroot(lambda t: mpmath.log(mpmath.ncdf(t)) - mpmath.log(u), -mpmath.sqrt(-2 * mpmath.log(u)))
        quantile.insert(0, [u, mpmath.nstr(z, 30)])

out = {"cdf": cdf, "quantile": quantile}
Path(__file__).with_name("gaussian_reference.json").write_text(json.dumps(out, indent=1) + "\n")
