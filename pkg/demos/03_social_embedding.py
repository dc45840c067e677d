"""
Placing districts in a latent social space
==========================================

Online social connectedness between districts behaves like an inverse
distance: strongly connected districts are "close" even when they are
geographically far apart. The embedding module turns the connectedness
matrix into dissimilarities, corrects them to be Euclidean if needed,
embeds them in the plane with classical multidimensional scaling, and
finally rotates/scales the result onto the geographic map so the two
coordinate systems are comparable.
"""
import numpy as np

from epimob.embedding import (ConnectednessMatrix, classical_mds,
                              connectedness_to_distance, embed_and_align,
                              procrustes_align)

rng = np.random.default_rng(3)
n = 12
ids = [f"d{i:03d}" for i in range(n)]

# latent positions in an unobserved social plane
Z = rng.uniform(0.0, 5.0, (n, 2))
D_true = np.sqrt(((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1))

# connectedness decays with social distance
C = 1.0 / np.maximum(D_true, 1e-9)
np.fill_diagonal(C, 1.0)
conn = ConnectednessMatrix(matrix=C, district_ids=ids)

distances = connectedness_to_distance(conn)
print("additive constant applied:", distances.additive_constant_applied)

emb = classical_mds(distances, p=2)
D_emb = np.sqrt(((emb.coords[:, None] - emb.coords[None]) ** 2).sum(-1))
print("max distance error after embedding:",
      f"{np.abs(D_emb - D_true).max():.2e}")
print("leading eigenvalues:", np.round(emb.eigenvalues[:4], 3))

# the embedding is only defined up to rotation/reflection/scale; align it
# with the original plane to compare coordinates directly
transform, aligned = procrustes_align(emb.coords, Z)
print("procrustes scale:", round(transform.rho, 4),
      " residual:", f"{transform.r_squared:.2e}")
print("max coordinate error after alignment:",
      f"{np.abs(aligned - Z).max():.2e}")

# embed_and_align bundles the whole chain against geographic centroids;
# here geography resembles the social plane up to scale, rotation and a
# bit of noise, as it does for real commuting regions
theta = 0.7
R = np.array([[np.cos(theta), -np.sin(theta)],
              [np.sin(theta), np.cos(theta)]])
geo = 1.8 * Z @ R.T + np.array([3.0, 1.0]) + 0.4 * rng.normal(size=(n, 2))
aligned2, transform2, dist2, emb2 = embed_and_align(conn, geo)
print("\nfull chain: stress", f"{emb2.stress:.3f}",
      "alignment residual", f"{transform2.r_squared:.3f}")
print("social coordinates live on the map scale now:")
print(" geo extent    ", np.round(geo.min(axis=0), 2), "to",
      np.round(geo.max(axis=0), 2))
print(" aligned extent", np.round(aligned2.min(axis=0), 2), "to",
      np.round(aligned2.max(axis=0), 2))
