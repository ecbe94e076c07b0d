"""
The two pretraining losses
==========================

The patient-embedding loss pulls the three modality embeddings of each
patient together; the prototype loss asks each modality to predict the
cluster another modality of the same patient was assigned to.
"""

import numpy as np

from modalsurv.cpm import PrototypeBank, cpm_loss, refresh_assignments
from modalsurv.mpe import ModalityBatch, MpeConfig, mpe_loss


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


rng = np.random.default_rng(1)
batch_size, dim = 8, 16
shared = unit(rng.standard_normal((batch_size, dim)))

###############################################################################
# Contrastive alignment
# ---------------------
# Each modality sees the shared patient vector plus its own noise. As the
# noise shrinks, matched pairs dominate the softmax and the loss drops
# towards zero. With heavy noise the matched pair has no advantage, and
# at tau = 0.1 the sharpened softmax puts the loss above ln(batch size).

print(f"ln B = {np.log(batch_size):.3f}")
for noise in (3.0, 1.0, 0.3, 0.05):
    t, p, r = (unit(shared + noise * rng.standard_normal(shared.shape)) for _ in range(3))
    rec = mpe_loss(ModalityBatch(t, p, r), MpeConfig(tau1=0.1))
    print(f"noise {noise:4.2f}: L_MPE = {rec.value:.4f}")

# The gradients come back alongside the value, one array per modality
print("gradient shapes:", {k: v.shape for k, v in rec.grads.items()})

###############################################################################
# Prototype targets
# -----------------
# K-means over all embeddings (pooled across modalities, seeded from the
# current prototypes) assigns every embedding a cluster. The loss is a
# cross-entropy: CT predicts the PET cluster, PET the RNA cluster, and RNA
# the CT cluster.

bank = PrototypeBank.random(4, dim, seed=0, tau2=0.2)
for noise in (1.0, 0.05):
    t, p, r = (unit(shared + noise * rng.standard_normal(shared.shape)) for _ in range(3))
    assigns, km = refresh_assignments(t, p, r, bank)
    agree = np.mean((assigns.z_t == assigns.z_p) & (assigns.z_p == assigns.z_r))
    # prototypes sit at the K-means centroids once they are refreshed
    fitted = PrototypeBank(km.centroids, tau2=0.2)
    rec = cpm_loss(ModalityBatch(t, p, r), fitted, assigns)
    print(f"noise {noise:4.2f}: clusters agree across modalities for {agree:.0%}, L_CPM = {rec.value:.4f}")
