import numpy as np
import pytest

from fipmae.modalities import RenderConfig, build_sample
from fipmae.sigsim import ModulationScheme

SCHEMES = list(ModulationScheme)


def make_samples(n, base_seed, render_cfg=None, snr_values=None, labeled=True):
    """Deterministic desk-scale sample batch, one rng stream per index."""
    cfg = render_cfg or RenderConfig()
    out = []
    for i in range(n):
        rng = np.random.default_rng((base_seed, i))
        scheme = SCHEMES[int(rng.integers(0, len(SCHEMES)))]
        if snr_values is None:
            snr = float(rng.uniform(-10.0, 10.0))
        else:
            snr = float(snr_values[i % len(snr_values)])
        s = build_sample(scheme, snr, rng, cfg)
        if not labeled:
            s.label = None
        out.append(s)
    return out


@pytest.fixture(scope="session")
def desk_samples():
    """Small labeled pool reused across tests that just need plausible data."""
    return make_samples(8, 4242)
