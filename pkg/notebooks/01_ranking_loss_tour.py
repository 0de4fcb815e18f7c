"""
Ranking consistency on a toy batch
==================================

Walks through the gene/image similarity matrices for a handful of spots, the
ranking residual, and how the cyclic sampler relates to the full triplet sum.
Run with ``python notebooks/01_ranking_loss_tour.py``.
"""

# %%
import numpy as np

from crossrank.losses import (LossConfig, classic_margin_loss, cosine_sim_matrix, ranking_loss_full,
                              ranking_loss_sampled, ranking_residual, sample_all_pairings, sample_pairings)
from crossrank.numcore import l2_normalize_rows

rng = np.random.default_rng(0)
gene, _ = l2_normalize_rows(rng.standard_normal((6, 4)))
img, _ = l2_normalize_rows(gene + 0.5 * rng.standard_normal((6, 4)))
sg = cosine_sim_matrix(gene, gene)
si = cosine_sim_matrix(img, img)
np.set_printoptions(precision=3, suppress=True)
print("gene similarities\n", sg)
print("image similarities\n", si)

# %%
# The residual for anchor 0 and targets 1, 2. Positive means the image side
# either orders the pair the wrong way or separates it less than the genes do.
print("residual(0, 1, 2) =", round(ranking_residual(sg, si, 0, 1, 2), 4))
print("residual(0, 2, 1) =", round(ranking_residual(sg, si, 0, 2, 1), 4))

# %%
# One anchor's cyclic pairs: every other spot shows up in exactly two of them.
pairs = sample_pairings(6, 0, rng)
print(pairs)
print(np.bincount(pairs.ravel(), minlength=6))

# %%
# The full sum is cubic in the batch; the sampled one is quadratic and matches
# it up to a factor of n - 2 on average.
cfg = LossConfig()
full, _ = ranking_loss_full(sg, si, cfg)
draws = [ranking_loss_sampled(sg, si, sample_all_pairings(6, s), cfg)[0] for s in range(5000)]
print(f"full / (n - 2) = {full / 4:.4f}, mean sampled = {np.mean(draws):.4f}")

# %%
# The fixed-margin baseline asks for the same ordering but a constant gap.
margin, _ = classic_margin_loss(sg, si, 0.1, sample_all_pairings(6, 0), cfg)
print(f"fixed-margin loss on one draw: {margin:.4f}")
