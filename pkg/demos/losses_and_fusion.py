"""
Fusion module and the three training losses
===========================================

Face and voice features are projected to a shared latent space, gated by
``sigmoid(tanh Xf + tanh Xv)``, stacked as two channels and mixed by a
1-D convolution.  Training combines MSE alignment, the orthogonal
projection loss on fused embeddings, and identity cross-entropy.
"""

import math

import numpy as np

from rfop.autograd import Tensor
from rfop.losses import LossWeights, cross_entropy, mse_alignment, opl, total_loss
from rfop.model import LatentPair, ModelConfig, forward, init_params

cfg = ModelConfig(face_dim=12, voice_dim=8, latent_dim=6, num_identities=4, conv_kernel=3, seed=1)
params = init_params(cfg)
rng = np.random.default_rng(1)
out = forward(params, rng.normal(size=(8, 12)), rng.normal(size=(8, 8)))
print("attention range", out.attention.data.min(), out.attention.data.max())
print("fused", out.fused.shape, "logits", out.logits.shape)

labels = [0, 0, 1, 1, 2, 2, 3, 3]
parts = total_loss(out.latent, out.fused, out.logits, labels, LossWeights())
print(f"total {parts.total.item():.4f} = 0.02*{parts.mse:.4f} + 0.78*{parts.opl:.4f} + 0.2*{parts.ce:.4f}")

# hand batch: every term has a closed form
xf = Tensor(np.array([[1.0, 0.0]]))
xv = Tensor(np.array([[0.0, 1.0]]))
print("MSE", mse_alignment(LatentPair(xf, xv)).item())
print("OPL", opl(Tensor(np.array([[1.0, 0], [0, 1], [1, 0]])), [0, 0, 1]).item())
print("CE ", cross_entropy(Tensor(np.zeros((1, 2))), [0]).item(), "vs ln 2 =", math.log(2))

# OPL ignores the scale of each embedding
f = rng.normal(size=(6, 4))
print(opl(Tensor(f), labels[:6]).item(), opl(Tensor(3.7 * f), labels[:6]).item())
