"""
The update as a vector field
============================

For a one-dimensional target N(0, 1), every Gaussian N(mu, sigma^2) gets an
update direction (dmu, dsigma), averaged over five samples. The field points
toward (0, 1) from everywhere on the grid.
"""

from pathlib import Path

from gsmvi.harness import parse_config_text, vectorfield

config = parse_config_text("experiment = vectorfield\nvf_resolution = 9\n", base_dir=Path.cwd())
rows = vectorfield(config)

###############################################################################
# Print one arrow per grid cell: columns are mu, rows are sigma (top = large).

arrows = {(1, 0): "→", (-1, 0): "←", (0, 1): "↑", (0, -1): "↓",
          (1, 1): "↗", (-1, 1): "↖", (1, -1): "↘", (-1, -1): "↙", (0, 0): "·"}


def direction(dmu, dsigma):
    def sign(x, other):
        return 0 if abs(x) < 0.4 * abs(other) else (1 if x > 0 else -1)

    return arrows[(sign(dmu, dsigma), sign(dsigma, dmu))]


sigmas = sorted({r[1] for r in rows}, reverse=True)
mus = sorted({r[0] for r in rows})
cell = {(r[0], r[1]): direction(r[2], r[3]) for r in rows}
for s in sigmas:
    print(f"sigma={s:4.2f}  " + " ".join(cell[(m, s)] for m in mus))
print(" " * 12 + " ".join("|" for _ in mus))
print("mu from", mus[0], "to", mus[-1])
