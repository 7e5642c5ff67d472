"""
Reverse-mode gradients on a tape
================================

Every op appends to the graph's tape; backward walks it once in reverse.
"""

import numpy as np

from amrod import autodiff as ad

# a parameter leaf and a scalar loss built from it
g = ad.Graph()
p = g.param("p", np.array([1.0, 2.0]))
loss = ad.sum(p * p)
print("loss:", loss.item())
print("d loss / d p:", g.backward(loss)["p"])  # [2, 4]

# the same graph cannot be differentiated twice
try:
    g.backward(loss)
except ad.GraphError as e:
    print("second backward:", e)

# log-softmax gradient against a central difference
z0 = np.array([1.0, 2.0])
g = ad.Graph()
z = g.param("z", z0)
grad = g.backward(ad.sum(ad.mul(ad.log_softmax(z), [1.0, 0.0])))["z"]
h = 1e-6
f = lambda v: v[0] - np.log(np.exp(v).sum())  # noqa: E731
fd = np.array([(f(z0 + h * e) - f(z0 - h * e)) / (2 * h) for e in np.eye(2)])
print("analytic:", grad, "finite difference:", fd)

# clamp passes gradient only inside its range
g = ad.Graph()
q = g.param("q", np.array([-2.0, 0.3, 5.0]))
print("clamp gradient:", g.backward(ad.sum(ad.clamp(q, -1.0, 1.0)))["q"])
