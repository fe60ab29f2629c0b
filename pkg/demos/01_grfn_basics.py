"""Tour of the GRFN uncertainty algebra.

A GRFN carries a location mu, an aleatory variance sigma2, and an epistemic
precision h.  This script walks through the contour function, interval
belief/plausibility, the two prediction intervals, and checks the closed
forms against the Monte Carlo oracle.
"""

from dpsurv import (
    GRFN,
    Interval,
    bel_interval,
    bel_halfline,
    bpi,
    combine,
    contour,
    pl_interval,
    pl_halfline,
    ppi,
)
from dpsurv.grfn import mc_oracle_bel, mc_oracle_pl

g = GRFN(mu=0.0, sigma2=1.0, h=2.0)
print("GRFN:", g)

print("\ncontour (singleton plausibility) peaks at mu:")
for x in (-2.0, -1.0, 0.0, 1.0, 2.0):
    print(f"  pl({x:+.0f}) = {contour(g, x):.4f}")

iv = Interval(-1.0, 1.0)
print(f"\ninterval {iv}:")
print(f"  Bel = {bel_interval(g, iv):.4f}  <=  Pl = {pl_interval(g, iv):.4f}")
print(f"  MC oracle (1e6 samples): Bel = {mc_oracle_bel(g, iv, 10**6, 0):.4f}, "
      f"Pl = {mc_oracle_pl(g, iv, 10**6, 0):.4f}")

print("\nvacuous evidence (h = 0) believes nothing and allows everything:")
vacuous = GRFN(0.0, 1.0, 0.0)
print(f"  Bel = {bel_interval(vacuous, iv):.1f}, Pl = {pl_interval(vacuous, iv):.1f}")

print("\nhuge precision collapses to an ordinary Gaussian:")
from scipy.special import ndtr
sharp = GRFN(0.0, 1.0, 1e8)
print(f"  Bel = Pl = {bel_interval(sharp, iv):.6f} "
      f"(Gaussian prob {ndtr(1) - ndtr(-1):.6f})")

print("\nhalf-lines give survival bounds; Pl - Bel equals the contour:")
for x in (-1.0, 0.0, 1.0):
    b, p = bel_halfline(g, x), pl_halfline(g, x)
    print(f"  x={x:+.0f}: Bel={b:.4f} Pl={p:.4f} gap={p - b:.4f} "
          f"contour={contour(g, x):.4f}")

print("\nprediction intervals at the 90% level:")
print(f"  BPI (uses h):      {bpi(g, 0.9)}")
print(f"  PPI (ignores h):   {ppi(g, 0.9)}")
print("  the BPI is wider: epistemic uncertainty stretches the interval")

print("\ncombining evidence: precisions add, variance contracts")
a = GRFN(1.0, 1.0, 2.0)
b = GRFN(2.0, 0.5, 4.0)
for s in (1.0, 0.5, 0.1):
    out = combine([(s, a), (1.0, b)])
    print(f"  s_a={s:.1f}: mu={out.mu:.3f} sigma2={out.sigma2:.3f} h={out.h:.3f}")
