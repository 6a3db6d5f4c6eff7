import numpy as np
import pytest

from sfdd import data, nn


def naive_conv(x, w):
    """Scalar-loop 3x3 cross-correlation, stride 1, zero padding 1."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((n, o, h, wd))
    for i in range(n):
        for f in range(o):
            for y in range(h):
                for z in range(wd):
                    acc = 0.0
                    for ch in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                yy, zz = y + dy - 1, z + dx - 1
                                if 0 <= yy < h and 0 <= zz < wd:
                                    acc += float(x[i, ch, yy, zz]) * float(w[f, ch, dy, dx])
                    out[i, f, y, z] = acc
    return out


def toy_dataset(m_per_class=10, n_c=4, shape=(1, 6, 6), seed=0):
    gen = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_c), m_per_class)
    images = gen.uniform(0, 1, size=(len(labels),) + shape).astype(np.float32)
    # class-dependent brightness pattern so the task is learnable
    for c in range(n_c):
        images[labels == c, :, c % shape[1], :] = 1.0
    return data.LabeledDataset(images, labels, n_c)


@pytest.fixture
def tiny_spec():
    return nn.ModelSpec(input_shape=(1, 6, 6), n_c=4, net_width=3, net_depth=1)


@pytest.fixture(scope="session")
def desk():
    return data.load_desk_mnist()


@pytest.fixture
def report(request):
    """Record one acceptance line; all lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def add(name, ok, detail):
        lines.append(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
        print(lines[-1])

    return add


ACCEPTANCE_KEY = pytest.StashKey()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
