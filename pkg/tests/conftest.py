import numpy as np
import pytest

from fedsoda.model import ModelConfig, TransformerModel


TINY = ModelConfig(V=16, S=12, d_model=16, f=2, heads=2, m=6, L_A=2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return TransformerModel.init(TINY, seed=3, std=0.3)


def central_diff(f, arr, idx, h=1e-5):
    """Central finite difference of scalar ``f()`` with respect to ``arr[idx]``."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def tokens(rng, B, S, V):
    return rng.integers(3, V, size=(B, S))


def tiny_experiment(**overrides):
    """A seconds-scale configuration: 8 blocks, the last 2 form the adapter."""
    from fedsoda.config import ExperimentConfig

    base = ExperimentConfig(
        model=dict(V=64, S=48, d_model=16, f=2, heads=2, m=8, L_A=2),
        corpus=dict(public=48, public_eval=16, public_len=16, pretrain_tasks=0, private=60, eval=20),
        pruning=dict(n=1, p=2, calibration_samples=16),
        alignment=dict(sample_count=8, batch_size=8, r_interval=2, E_r=1),
        fed=dict(N=3, I=4, batch_size=8),
        lora=dict(r=2, alpha=4.0),
        pretrain=dict(steps=0),
    )
    return base.with_overrides(**overrides) if overrides else base


@pytest.fixture(scope="session")
def tiny_setup():
    from fedsoda.corpus import gen_corpus

    cfg = tiny_experiment()
    bundle = gen_corpus(cfg.corpus_spec())
    full = TransformerModel.init(cfg.to_model_config(), seed=cfg.seed, std=0.1)
    return cfg, bundle, full


def lora_set(seed, layers=(0, 1), d=16, r=2):
    """Adapter-style LoRA set with non-zero ``B`` so every factor gets a gradient."""
    from fedsoda.lora import make_lora_set

    rng = np.random.default_rng(seed)
    mods = make_lora_set([(l, m) for l in layers for m in ("q", "v")], d, r, 4.0, 0.05, rng)
    for mod in mods.values():
        mod.B.data = rng.normal(0, 0.05, mod.B.shape)
    return mods


def same_lora(a, b):
    return sorted(a) == sorted(b) and all(
        np.array_equal(a[k].A.data, b[k].A.data) and np.array_equal(a[k].B.data, b[k].B.data) for k in a
    )


def cell_rms_bounds():
    """Conditional RMS error of each 4-bit code cell under a unit normal, by quadrature."""
    import math
    from statistics import NormalDist

    from scipy import integrate
    from scipy.special import ndtri

    phi = NormalDist()
    top = 15
    out = []
    for c in range(16):
        lo = -np.inf if c == 0 else ndtri((c - 0.5) / top)
        hi = np.inf if c == 15 else ndtri((c + 0.5) / top)
        rec = ndtri((c + 0.5) / 16)
        mass = phi.cdf(hi) - phi.cdf(lo)
        se, _ = integrate.quad(lambda t: (t - rec) ** 2 * math.exp(-t * t / 2) / math.sqrt(2 * math.pi), lo, hi)
        out.append(math.sqrt(se / mass))
    return out


# -- acceptance verdicts ------------------------------------------------------
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict(request):
    """Dict the test fills with ``ok`` and ``detail``; recorded for the summary even on error."""
    box = {}
    yield box
    key = request.node.get_closest_marker("criterion").args[0]
    ACCEPTANCE[key] = (bool(box.get("ok", False)), box.get("detail", "did not finish"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
