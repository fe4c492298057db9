"""Walk through the synthetic generator: class-conditional Markov chains,
lognormal amounts, CSV round trip.

Run from the repository root:  python3 demos/01_synthetic_data.py
"""

import tempfile
from pathlib import Path

import numpy as np

from evseq.data import (SynthSpec, Vocabulary, load_csv, normalize_amounts,
                        save_csv, split_dataset, synthesize_dataset,
                        transition_matrices)

spec = SynthSpec(n_classes=2, vocab_size=12, n_sequences=400,
                 len_range=(30, 80), beta=0.6)
ds = synthesize_dataset(spec, seed=7)

print(f"dataset: {len(ds)} sequences, vocab {ds.vocab_size}, "
      f"{ds.num_classes} classes")
lengths = np.array([len(s.mcc) for s in ds.sequences])
print(f"lengths: min {lengths.min()}  max {lengths.max()}  "
      f"mean {lengths.mean():.1f}")

# Each class mixes a shared base chain with its own permuted copy; beta is the
# mixing weight, so beta=0 makes the classes indistinguishable.
chains = transition_matrices(spec, seed=7).transition
print(f"\ntransition matrices: {chains.shape}")
gap = np.abs(chains[0] - chains[1]).max()
print(f"largest class difference in one transition prob: {gap:.3f}")

# Empirical transition counts of class-0 sequences should track chain 0.
counts = np.zeros_like(chains[0])
for s in ds.sequences:
    if s.label != 0:
        continue
    codes = np.asarray(s.mcc) - 1          # drop the UNK slot
    np.add.at(counts, (codes[:-1], codes[1:]), 1.0)
rows = counts.sum(axis=1, keepdims=True)
empirical = counts / np.maximum(rows, 1.0)
err = np.abs(empirical - chains[0])[rows[:, 0] > 200]
print(f"empirical vs true rows (well-sampled only): max abs err {err.max():.3f}")

# Amounts are lognormal with a class-dependent location shift.
for c in range(spec.n_classes):
    amts = np.concatenate([s.amount for s in ds.sequences if s.label == c])
    print(f"class {c}: median amount {np.median(amts):8.2f}  "
          f"({amts.size} events)")

# Files: events CSV + labels CSV + vocab listing. Loading with the saved
# vocabulary keeps the original code indices (without it, codes are renumbered
# in first-appearance order).
with tempfile.TemporaryDirectory() as tmp:
    events = Path(tmp) / "events.csv"
    save_csv(ds, events, labels_path=Path(tmp) / "labels.csv",
             vocab_path=Path(tmp) / "vocab.txt")
    back = load_csv(events, Path(tmp) / "labels.csv",
                    vocab=Vocabulary.load(Path(tmp) / "vocab.txt"))
    same = all(np.array_equal(a.mcc, b.mcc) and np.allclose(a.amount, b.amount)
               for a, b in zip(ds.sequences, back.sequences))
    print(f"\nCSV round trip intact: {same}")

# The usual prep: split by sequence, standardize log-amounts with train stats.
tr, va, te = split_dataset(ds, (0.8, 0.1, 0.1), seed=0)
tr = normalize_amounts(tr)
va = normalize_amounts(va, stats=tr.amount_stats)
print(f"\nsplits: train {len(tr)} / val {len(va)} / test {len(te)}")
print(f"train amount stats (mean, std of signed log1p): "
      f"({tr.amount_stats[0]:.3f}, {tr.amount_stats[1]:.3f})")
