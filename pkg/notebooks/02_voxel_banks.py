"""
Pseudo-label banks from a single noisy scan
===========================================

Both banks are built from one low-dose sinogram stack.  Each bank holds k
volumes that look like the input but carry different noise; pairs of
members are the training data.

Run with ``python notebooks/02_voxel_banks.py``.
"""

import numpy as np

from scout.bank import BankConfig, ConjugateConfig, build_conjugate_bank, build_statistical_bank
from scout.geometry import fan_geometry
from scout.pipeline import simulate_study
from scout.simulate import NoiseModel
from scout.volume import RandomSource

# %%
# A short stack at a fraction of the clinical flux, so noise is obvious.
g = fan_geometry(360, 360, (128, 128))
st = simulate_study("shepp_logan", 8, g, NoiseModel(i0=1e4), seed=3)
noisy, clean = st.low_dose.data, st.clean.data
print("sinogram stack", st.low_dose.dims, "noise std", float(np.std(noisy - clean)))

# %%
# Statistical bank: for every voxel, the centers of the k most similar
# 3x3x3 blocks inside a 15^3 window (the voxel itself excluded).  Matching
# favors blocks whose noise resembles the reference block's, so member
# noise stays partly correlated with the input.
cfg = BankConfig(n=3, W=15, k=8)
stat = build_statistical_bank(st.low_dose, cfg)
for j in (0, 3, 7):
    m = stat.volumes[j].data
    print(f"statistical member {j}: error vs clean {np.std(m - clean):.4f}, "
          f"corr of noise with input {np.corrcoef((m - clean).ravel(), (noisy - clean).ravel())[0, 1]:+.3f}")

# %%
# Conjugate bank: a random 30% of samples are swapped for the measurement
# of the same ray taken half a turn later, on a neighboring slice.
conj = build_conjugate_bank(st.low_dose, g, ConjugateConfig(p2=0.3, m=2), k=8, rng=RandomSource(3))
changed = np.mean(conj.volumes[0].data != noisy)
print(f"conjugate member 0 differs from the input at {changed:.1%} of samples")

# %%
# Two members of a bank share the signal.  Statistical members share only
# part of their noise; conjugate members share the 70% of samples neither
# one replaced, so only the swapped samples carry independent noise.
# Both kinds are mixed during training.
for name, bank in (("statistical", stat), ("conjugate", conj)):
    a, b = bank.volumes[0].data - clean, bank.volumes[1].data - clean
    print(f"{name:11s} member noise correlation {np.corrcoef(a.ravel(), b.ravel())[0, 1]:+.3f}")
