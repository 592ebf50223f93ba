"""Walk through the two training losses and check their gradients.

The contrastive loss scores one positive pair against a queue of negatives;
the distance loss just pulls matched rows together. Both return analytic
gradients, verified here against central finite differences.
"""

import numpy as np

from airl.frameworks import byol_loss, contrastive_loss
from airl.numerics import Rng, finite_diff_grad, relative_error

rng = Rng(0)


def unit_rows(stream, n, d):
    z = stream.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


q = unit_rows(rng.child("q"), 4, 16)
k = unit_rows(rng.child("k"), 4, 16)
negatives = unit_rows(rng.child("neg"), 32, 16)

loss, grad = contrastive_loss(q, k, negatives, temperature=0.2)
print(f"contrastive loss with 32 negatives: {loss:.4f}")

loss_empty, _ = contrastive_loss(q, k, np.zeros((0, 16)), temperature=0.2)
print(f"contrastive loss with an empty queue: {loss_empty} (exactly zero)")

fd = finite_diff_grad(lambda v: contrastive_loss(v, k, negatives, 0.2)[0], q)
print(f"gradient vs finite differences: {relative_error(grad, fd):.2e}")

# a perfectly aligned positive against one orthogonal negative
aligned = np.array([[1.0, 0.0]])
orthogonal = np.array([[0.0, 1.0]])
loss, _ = contrastive_loss(aligned, aligned, orthogonal, 0.2)
print(f"aligned-positive case: {loss:.6f} = log(1 + e^-5) = "
      f"{np.log1p(np.exp(-5.0)):.6f}")

loss, grad = byol_loss(q, k)
dots = float(np.mean(np.sum(q * k, axis=1)))
print(f"distance loss: {loss:.4f} = 2 - 2 * mean(q.k) = {2 - 2 * dots:.4f}")
fd = finite_diff_grad(lambda v: byol_loss(v, k)[0], q)
print(f"gradient vs finite differences: {relative_error(grad, fd):.2e}")
