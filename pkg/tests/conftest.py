import pytest

from adapter_sentinel.adapters import PeftMethod, init_adapter
from adapter_sentinel.autodiff import Rng
from adapter_sentinel.encoder import BaseModel, EncoderConfig, init_params
from adapter_sentinel.forge import ToyTask

TINY = EncoderConfig(vocab_size=64, seq_len=8, d_model=16, n_heads=2, n_layers=2, d_ff=32, num_classes=2)


@pytest.fixture(scope="session")
def tiny_task():
    return ToyTask(vocab_size=64, seq_len=8, max_markers=3)


@pytest.fixture(scope="session")
def tiny_base():
    return BaseModel(TINY, init_params(TINY, Rng(5)))


def random_bundle(method, base=None, targets=("q", "v"), seed=0, layers=2, d=16, scale=0.1):
    """A bundle with every factor filled with noise (so its increment is non-zero)."""
    rng = Rng(seed)
    weights = base.target_weights(targets) if base is not None else \
        {(i, t): rng.normal((d, d), 0.3) for i in range(layers) for t in ("q", "k", "v", "o")}
    m = method if isinstance(method, PeftMethod) else PeftMethod(method, 4)
    b = init_adapter(m, layers, d, d, rng, targets, weights)
    for ld in b.layers:
        for f in ld.factors.values():
            for name in list(f):
                if name == "V":
                    continue
                if name == "m":
                    f[name] = f[name] * (1 + rng.uniform(f[name].shape, -0.2, 0.2))
                else:
                    f[name] = rng.normal(f[name].shape, scale)
    return b


@pytest.fixture
def rand_bundle():
    return random_bundle
