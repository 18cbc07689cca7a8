import numpy as np
import pytest


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar f with respect to array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(total_tokens=8, T=8, L=1, d=8, d_ff=16, h=2, p_drop=0.0)


def model_gradient_error(seed=0, **overrides):
    """Worst relative error between backprop and central differences over every parameter."""
    from canids.model import CanBertModel, ModelConfig
    from canids.training import mask_batch

    cfg = ModelConfig(**{**TINY, **overrides})
    model = CanBertModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.M, size=(3, cfg.T))
    batch = mask_batch(tokens, 0.45, rng, cfg.M)

    def loss():
        logits = model.forward(batch.inputs)
        bi, ti = batch.index
        from canids.numerics import cross_entropy_from_logits
        return cross_entropy_from_logits(logits[bi, ti], batch.targets)[0]

    model.zero_grad()
    model.masked_loss_and_grad(batch.inputs, batch.index, batch.targets, training=False)
    analytic = {k: p.grad.copy() for k, p in model.params.items()}
    worst = {}
    for name, p in model.params.items():
        num = numeric_grad(loss, p.value)
        worst[name] = rel_err(analytic[name], num)
    return worst


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE: dict[int, str] = {}


class AcceptanceLog:
    def record(self, n: int, status: str, detail: str) -> None:
        line = f"criterion {n:2d}: {status:7s} {detail}"
        _ACCEPTANCE[n] = line
        print(line)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
