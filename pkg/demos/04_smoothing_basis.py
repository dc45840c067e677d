"""
Penalized basis blocks: P-splines, thin plates and ridges
=========================================================

Every flexible term in the model is a basis block: a design matrix plus
a penalty matrix whose quadratic form measures roughness. P-splines
penalize squared differences of neighbouring B-spline coefficients,
thin-plate blocks penalize curvature of a bivariate surface, and ridge
blocks shrink one coefficient per category toward zero.
"""
import numpy as np

from epimob.basis import (SmoothSpec, absorb_sum_to_zero, pspline_block,
                          ridge_block, thinplate_block)

rng = np.random.default_rng(8)

x = np.sort(rng.uniform(0.0, 10.0, 80))
ps = pspline_block(x, SmoothSpec("pspline", k=9), label="trend")
print("pspline design:", ps.design.shape, " penalty:", ps.penalty.shape)
print("rows sum to one (B-spline partition of unity):",
      np.allclose(ps.design.sum(axis=1), 1.0))

# order-2 differences annihilate linear coefficient sequences, so a
# straight line costs nothing
linear = np.linspace(-1.0, 1.0, ps.design.shape[1])
print("penalty on a linear coefficient vector:",
      float(linear @ ps.penalty @ linear))
print("penalty null space dimension:", ps.nullspace_dim)

wiggly = rng.normal(size=ps.design.shape[1])
print("penalty on a rough vector:", round(float(wiggly @ ps.penalty @ wiggly), 3))

# bivariate thin-plate surface over district centroids, truncated to a
# small rank so large maps stay tractable
coords = rng.uniform(0.0, 10.0, (40, 2))
tp = thinplate_block(coords, SmoothSpec("thinplate", k=8), label="surface")
print("\nthin plate design:", tp.design.shape)
# find a coefficient vector reproducing f(x) = 1 and confirm the
# roughness penalty ignores it
ones, *_ = np.linalg.lstsq(tp.design, np.ones(len(coords)), rcond=None)
print("penalty on a constant surface:",
      f"{float(ones @ tp.penalty @ ones):.2e}")

labels = rng.choice(["a", "b", "c"], size=30).tolist()
rb = ridge_block(labels, label="district")
print("\nridge block levels:", rb.levels)
print("ridge penalty is the identity:",
      np.array_equal(rb.penalty, np.eye(len(rb.levels))))

# sum-to-zero absorption drops one column so the block cannot compete
# with a global intercept
absorbed = absorb_sum_to_zero(ps)
print("\ncolumns before/after absorption:",
      ps.design.shape[1], "->", absorbed.design.shape[1])
print("fitted values now sum to zero for any coefficients:",
      abs(absorbed.design.sum(axis=0) @ rng.normal(size=absorbed.design.shape[1])) < 1e-9)
