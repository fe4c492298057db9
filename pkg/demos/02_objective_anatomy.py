"""Dissect the two objectives on small hand-sized inputs: view sampling and
pair mining for the contrastive loss, masked-position InfoNCE for the
predictive one.

Run from the repository root:  python3 demos/02_objective_anatomy.py
"""

import numpy as np

from evseq.autodiff import Tensor
from evseq.data import SynthSpec, rng_for, synthesize_dataset
from evseq.objectives import (MaskedBatch, ViewBatch, coles_loss, coles_pairs,
                              cmlm_loss, hybrid_loss, pairwise_cosine_distances,
                              sample_mask, sample_negative_sets, sample_views)

ds = synthesize_dataset(SynthSpec(n_sequences=4, len_range=(10, 14)), seed=1)

# Views are contiguous crops; each remembers which sequence it came from.
views = sample_views(ds.sequences, n_views=3, len_range=(4, 8),
                     seed=rng_for(0, 1))
print("views (origin, start, length):")
for v in views:
    print(f"  seq {v.origin}  [{v.start}:{v.start + v.length}]")

# Pair mining works on the view embeddings. With a made-up embedding matrix
# we can see exactly which pairs the loss will touch: every same-origin pair
# is a positive; each view contributes its n_hard nearest other-origin views
# as negatives, deduplicated.
rng = np.random.default_rng(0)
z = rng.normal(size=(len(views), 5))
origins = np.array([v.origin for v in views])
pos, neg = coles_pairs(z, origins, n_hard=2)
print(f"\n{len(views)} views -> {len(pos)} positive pairs, "
      f"{len(neg)} mined negative pairs")
d = pairwise_cosine_distances(z)
print(f"closest cross-origin distance: {min(d[i, j] for i, j in neg):.3f}")

loss = coles_loss(ViewBatch(Tensor(z), origins), rho=0.5, n_hard=2)
print(f"contrastive loss on this batch: {loss.data:.4f}")

# A fully workable hand case: three unit vectors, two origins. The lone
# positive pair is orthogonal (d = 1), one negative pair is coincident
# (d = 0, hinge = rho) and the mined set keeps it; mean of 1^2 and 0.5^2
# over... run it:
z3 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
o3 = np.array([0, 0, 1])
print(f"hand case: {coles_loss(ViewBatch(Tensor(z3), o3), 0.5, 1).data:.4f} "
      "(expect 0.625)")

# The masked objective never sees codes at the masked slots; it must place
# its *prediction vector* closer to the true event embedding than to the
# sampled negatives. Identical rows make every candidate equally likely, so
# the loss is exactly log(#candidates).
targets = Tensor(np.tile([[1.0, 0.0]], (4, 1)))
preds = Tensor(np.tile([[0.6, 0.8]], (4, 1)))
negs = sample_negative_sets(4, n_neg=3, seed=rng_for(0, 2))
print("\nnegative sets per position:", [list(map(int, n)) for n in negs])
nce = cmlm_loss(MaskedBatch(targets, preds, negs))
print(f"InfoNCE with indistinguishable rows: {nce.data:.4f} "
      f"(log 4 = {np.log(4.0):.4f})")

# Mask plans: Bernoulli per position, never empty.
plan = sample_mask([12, 3], rate=0.15, seed=rng_for(0, 3))
print(f"masked positions, T=12: {list(map(int, plan.positions[0]))}  "
      f"T=3: {list(map(int, plan.positions[1]))}")

# The combined loss is plain linear composition, so its gradient splits too.
total = hybrid_loss(loss, nce, lam=0.05)
print(f"\nhybrid = {loss.data:.4f} + 0.05 * {nce.data:.4f} = {total.data:.4f}")
