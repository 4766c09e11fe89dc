"""Where the gradient goes under each kind of noise.

Plain multiplicative noise back-propagates through the noisy path.  The
non-correlating variants compute the same noisy forward value but send the
gradient through the clean path only.  This script shows both facts on one
dense layer with a fixed mask.
"""

import numpy as np

from ncmn import autodiff as ad
from ncmn.autodiff import Tensor
from ncmn.layers import BNLayer, batchnorm_standard, init_dense, preact, psi
from ncmn.noise import NoiseSpec, apply_mn, make_rng, ncmn1_layer, sample_mask

rng = make_rng(0)
layer = BNLayer(init_dense(6, 3, rng))
x = Tensor(rng.uniform(-2, 2, (16, 6)), requires_grad=True)
mask = sample_mask(NoiseSpec("uniform", 0.5), x.shape, rng)
probe = rng.standard_normal((16, 3))


def input_grad(out):
    x.grad = None
    layer.params.weight.grad = None
    ad.backward(ad.reduce_sum(ad.mul(out, probe)))
    return x.grad.copy()


clean = psi(x, layer, update_stats=False)
noisy_mn = psi(apply_mn(x, NoiseSpec(), mask=mask), layer, update_stats=False)
ncmn1 = ncmn1_layer(x, layer, NoiseSpec(), mask=mask)

g_clean = input_grad(psi(x, layer, update_stats=False))
g_mn = input_grad(psi(apply_mn(x, NoiseSpec(), mask=mask), layer, update_stats=False))
g_ncmn = input_grad(ncmn1_layer(x, layer, NoiseSpec(), mask=mask))

bn_noisy = batchnorm_standard(preact(ad.mul(x, mask), layer.params), layer.bn, update_stats=False)
print("forward: |ncmn1 - MN| =", np.abs(ncmn1.data - noisy_mn.data).max())
print("forward: |ncmn1 - BN(noisy z)| =", np.abs(ncmn1.data - bn_noisy.data).max())
print("forward: |ncmn1 - clean| =", np.abs(ncmn1.data - clean.data).max(), "(the noise is really there)")
print()
print("input gradient: |MN - clean|    =", np.abs(g_mn - g_clean).max())
print("input gradient: |ncmn1 - clean| =", np.abs(g_ncmn - g_clean).max())
