"""Random small computation graphs drawn from the primitive set, for gradient checks."""

import numpy as np

from sfdd import distill, nn
from sfdd.tensorcore import Tape, Tensor, backward, finite_diff, ops, precision

SPATIAL = ("conv2d", "instance_norm", "avgpool2x2", "sigmoid", "relu", "add", "sub", "mul_scalar")
HEADS = ("sum", "mean", "l2_norm", "dot", "matmul")


def random_graph(seed):
    """Return (f, x0, names): f maps a Tensor of x0's shape to a scalar Tensor."""
    gen = np.random.default_rng(seed)
    c = int(gen.integers(1, 3))
    h, w = int(gen.integers(2, 5)), int(gen.integers(2, 5))
    x0 = gen.normal(size=(int(gen.integers(1, 3)), c, h, w))
    steps = []
    shape = x0.shape
    for _ in range(int(gen.integers(2, 6))):
        name = SPATIAL[int(gen.integers(len(SPATIAL)))]
        if name == "avgpool2x2" and min(shape[2:]) < 2:
            name = "sigmoid"
        if name == "instance_norm" and shape[2] * shape[3] < 2:
            name = "relu"
        if name == "conv2d":
            o = int(gen.integers(1, 4))
            arg = gen.normal(size=(o, shape[1], 3, 3)) / 3
            shape = (shape[0], o) + shape[2:]
        elif name == "avgpool2x2":
            arg = None
            shape = shape[:2] + (shape[2] // 2, shape[3] // 2)
        elif name in ("add", "sub"):
            arg = gen.normal(size=shape)
        elif name == "mul_scalar":
            arg = float(gen.normal())
        else:
            arg = None
        steps.append((name, arg))
    head = HEADS[int(gen.integers(len(HEADS)))]
    flat = int(np.prod(shape[1:]))
    head_arg = None
    if head == "dot":
        head_arg = gen.normal(size=shape)
    elif head == "matmul":
        head_arg = gen.normal(size=(flat, 2))

    def f(x):
        for name, arg in steps:
            if name in ("conv2d", "add", "sub"):
                x = ops.apply(name, x, Tensor(arg))
            elif name == "mul_scalar":
                x = ops.mul_scalar(x, arg)
            else:
                x = ops.apply(name, x)
        if head == "dot":
            return ops.dot(x, Tensor(head_arg))
        if head == "matmul":
            y = ops.matmul(ops.reshape(x, (shape[0], flat)), Tensor(head_arg))
            return ops.sum(ops.mul(y, y))
        return ops.apply(head, x)

    return f, x0, [s[0] for s in steps] + [head]


def max_rel_error(a, b, floor=1e-6):
    """Largest |a - b| / max(|a|, |b|) over coordinates where |a| > floor."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    keep = np.abs(a) > floor
    if not np.any(keep):
        return float(np.max(np.abs(a - b), initial=0.0))
    return float(np.max(np.abs(a[keep] - b[keep]) / np.maximum(np.abs(a[keep]), np.abs(b[keep]))))


def check_graph(seed, h=1e-5):
    """Backward vs central differences on graph ``seed`` in float64."""
    f, x0, names = random_graph(seed)
    with precision(np.float64):
        with Tape():
            x = Tensor(x0, requires_grad=True)
            g, = backward(f(x), [x])
        fd = finite_diff(f, Tensor(x0), h=h)
    return max_rel_error(g.data, fd.data), names


def pixel_check(spec, s0, real, c, seed):
    with precision(np.float64):
        params = nn.build_model(spec, seed)
        gen = np.random.default_rng(seed)
        params = params.replace([a + 0.05 * gen.normal(size=a.shape) for a in params.arrays()])
        _, g = distill.class_pixel_grad(params, spec, s0, real, None, c)
        with_real = [t.detach() for t in nn.grad_params(params, spec, real, np.full(len(real), c))]

        def f(s):
            gs = nn.grad_params(params, spec, s, np.full(len(s0), c))
            return distill.matching_loss(gs, with_real)

        fd = finite_diff(f, s0, h=1e-5)
    return max_rel_error(g, fd.data)
