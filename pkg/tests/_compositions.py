"""Random expression graphs over the autodiff primitives, for gradient checks."""

import numpy as np

from metrosynth import autodiff as ad


def _unary(kind, x):
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "exp":
        return ad.exp(ad.tanh(x))
    if kind == "log":
        return ad.log(1.5 + ad.sin(x))
    if kind == "sqrt":
        return ad.sqrt(0.5 + ad.square(x))
    if kind == "sin":
        return ad.sin(x)
    if kind == "cos":
        return ad.cos(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    if kind == "square":
        return ad.square(ad.tanh(x))
    return ad.neg(x)


def _binary(kind, a, b, rng):
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "div":
        return a / (1.0 + ad.square(b))
    if kind == "max":
        return ad.maximum(a, b)
    if kind == "matmul":
        m = rng.normal(size=(a.shape[0], a.shape[0])) / np.sqrt(a.shape[0])
        return ad.tanh(a @ m) + b
    return ad.sum(a) * b


UNARY = ("tanh", "exp", "log", "sqrt", "sin", "cos", "sigmoid", "square", "neg")
BINARY = ("add", "sub", "mul", "div", "max", "matmul", "sum")


def random_composition(seed: int):
    """Return ``(f, inputs)``: ``f(list of nodes) -> scalar node``."""
    rng = np.random.default_rng(seed)
    n_inputs = int(rng.integers(1, 11))
    size = int(rng.integers(1, 4))
    depth = int(rng.integers(1, 9))
    plan = []
    for _ in range(depth):
        if rng.random() < 0.5:
            plan.append(("u", UNARY[rng.integers(len(UNARY))], int(rng.integers(10**6))))
        else:
            plan.append(("b", BINARY[rng.integers(len(BINARY))], int(rng.integers(10**6))))
    picks = [int(rng.integers(n_inputs)) for _ in range(depth)]
    weights = rng.normal(size=size)
    inputs = [rng.normal(size=size) for _ in range(n_inputs)]

    def f(xs):
        h = xs[0]
        for (kind, op, s), pick in zip(plan, picks):
            if kind == "u":
                h = _unary(op, h)
            else:
                h = _binary(op, h, xs[pick], np.random.default_rng(s))
        total = ad.sum(h * weights)
        for x in xs:
            total = total + 1e-3 * ad.sum(ad.square(x))
        return total

    return f, inputs


def check_composition(seed: int, h: float = 1e-5):
    """Largest relative deviation between adjoints and central differences.

    Entries whose derivative is itself close to zero are held to an absolute
    tolerance of 1e-8 instead. Returns ``(worst relative error, number of
    entries compared relatively)``.
    """
    f, inputs = random_composition(seed)
    xs = [ad.variable(x) for x in inputs]
    grads = ad.backward(f(xs), xs)
    worst, checked = 0.0, 0
    for i, x in enumerate(inputs):
        for j in range(x.size):
            up = [v.copy() for v in inputs]
            dn = [v.copy() for v in inputs]
            up[i][j] += h
            dn[i][j] -= h
            with ad.no_grad():
                fd = (f([ad.constant(v) for v in up]).value - f([ad.constant(v) for v in dn]).value) / (2 * h)
            g = grads[xs[i]][j]
            err = abs(g - fd)
            if abs(fd) < 1e-3 and err < 1e-8:
                continue
            checked += 1
            worst = max(worst, err / max(abs(fd), 1e-12))
    return worst, checked
