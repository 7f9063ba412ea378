"""The autodiff engine in a few checks: conv adjoint, gradient check, fault injection."""
import numpy as np

from memaudit.numerics import Tensor, conv3d, grad_check, square, sum_all, transposed_conv3d

rng = np.random.default_rng(0)

# transposed convolution is the exact adjoint of convolution
x = rng.standard_normal((1, 2, 6, 6, 6))
w = rng.standard_normal((3, 2, 3, 3, 3))
y = conv3d(Tensor(x), Tensor(w), 2, 1).data
g = rng.standard_normal(y.shape)
lhs = np.sum(y * g)
rhs = np.sum(x * transposed_conv3d(Tensor(g), Tensor(w), 2, 1, out_dims=x.shape[2:]).data)
print(f"<conv(x), g> = {lhs:.12f}\n<x, conv^T(g)> = {rhs:.12f}")

# backprop against central differences
params = {"x": x, "w": w}
rep = grad_check(lambda p: sum_all(square(conv3d(p["x"], p["w"], 2, 1))), params)
print(f"conv3d gradient check: max relative error {rep.max_rel_error:.2e}")

# a corrupted gradient is caught
fn = lambda p: sum_all(square(p["v"]))  # noqa: E731
v = rng.standard_normal(5) + 2
bad = 2 * v
bad[2] *= 2
print(f"corrupted gradient: max relative error {grad_check(fn, {'v': v}, analytic={'v': bad}).max_rel_error:.2f}")
