import numpy as np
import pytest

from cppf import autodiff as ad
from cppf import ssl

_REAL_CODES = ssl._codes
from cppf.autodiff import Tape, Tensor


def analytic_grads(fn, *arrays):
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
    tape.backward(out)
    return float(out.data), [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def numeric_grads(fn, *arrays, eps=1e-5):
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            shifted = [x.copy() for x in arrays]
            shifted[k][idx] = a[idx] + eps
            up = float(fn(*[Tensor(x) for x in shifted]).data)
            shifted[k][idx] = a[idx] - eps
            down = float(fn(*[Tensor(x) for x in shifted]).data)
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck(fn, *arrays, eps=1e-5):
    """Largest norm-wise relative error between tape and central-difference gradients."""
    _, ana = analytic_grads(fn, *arrays)
    num = numeric_grads(fn, *arrays, eps=eps)
    worst = 0.0
    for a, n in zip(ana, num):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


@pytest.fixture(autouse=True)
def _float64():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param_gradcheck(loss_fn, params, rng=None, coords=None, eps=1e-5):
    """Norm-wise relative error of tape gradients w.r.t. parameter tensors.

    ``coords`` limits the check to that many randomly chosen entries.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = loss_fn()
    tape.backward(out)
    entries = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if coords is not None and coords < len(entries):
        entries = [entries[i] for i in rng.choice(len(entries), coords, replace=False)]
    ana, num = [], []
    for k, idx in entries:
        p = params[k]
        ana.append(0.0 if p.grad is None else p.grad[idx])
        keep = p.data[idx]
        p.data[idx] = keep + eps
        up = float(loss_fn().data)
        p.data[idx] = keep - eps
        down = float(loss_fn().data)
        p.data[idx] = keep
        num.append((up - down) / (2 * eps))
    ana, num = np.array(ana), np.array(num)
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8))


class FrozenCodes:
    """Stand-in for the Sinkhorn codes step: records codes once, then replays them.

    Codes are stop-gradient targets, so finite differences must hold them fixed.
    """

    def __init__(self):
        self.real = _REAL_CODES
        self.saved = []
        self.calls = 0
        self.recording = True

    def __call__(self, *args):
        if self.recording:
            out = self.real(*args)
            self.saved.append(out)
            return out
        out = self.saved[self.calls % len(self.saved)]
        self.calls += 1
        return out

    def freeze(self):
        self.recording = False


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**kw):
    from cppf.config import TrainConfig

    base = dict(
        phases=1, epochs=2, warmup_epochs=1, batch_size=5, input_dim=4, hidden_dims=(8,), embed_dim=4,
        n_prototypes=4, n_centers=4, num_classes=2, per_class=10, probe_epochs=5,
    )
    base.update(kw)
    return TrainConfig(**base)


def second_phase_state(cfg, rng):
    """State at the start of phase 2: past teacher, queue and a fresh current teacher all present."""
    from cppf import trainer
    from cppf.pc import refresh_queue

    state = trainer.init_state(cfg)
    trainer.begin_phase(state, 0)
    trainer.train_step(state, *(rng.standard_normal((cfg.batch_size, cfg.input_dim)) for _ in range(2)), 0.05, 0.5, 0.1)
    trainer.end_phase(state)
    trainer.begin_phase(state, 1)
    state.queue = refresh_queue(state.prev_centers, state.prev_stats, np.random.default_rng(7), cfg.embed_dim, 0)
    return state
