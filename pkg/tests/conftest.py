import numpy as np
import pytest

from scenekt.autodiff import Tensor


def finite_difference(f, arrays, eps=1e-5):
    """Central-difference gradient of scalar f(arrays) w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in range(a.size):
            orig = a.flat[i]
            a.flat[i] = orig + eps
            fp = f(arrays)
            a.flat[i] = orig - eps
            fm = f(arrays)
            a.flat[i] = orig
            g.flat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def assert_grads_match(build_loss, arrays, rtol=1e-4, eps=1e-5):
    """Compare autodiff gradients of build_loss([Tensor,...]) against central
    finite differences of its value."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()

    def value(arrs):
        return float(build_loss([Tensor(x) for x in arrs]).value)

    numeric = finite_difference(value, [a.copy() for a in arrays], eps)
    for t, g in zip(tensors, numeric):
        assert rel_err(t.grad, g) <= rtol, f"gradient mismatch: {t.grad} vs {g}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset():
    from scenekt.data import GeneratorConfig, generate

    cfg = GeneratorConfig(
        n_object_classes=8,
        n_relations=7,
        scenes=50,
        d_v=8,
        d_s=4,
        objects_min=3,
        objects_max=5,
        seed=7,
    )
    return generate(cfg)
