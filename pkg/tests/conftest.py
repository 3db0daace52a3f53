import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from siamcd import kernels  # noqa: E402
from siamcd.data import SyntheticSiteConfig, generate_synthetic_site  # noqa: E402

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_site_config():
    return SyntheticSiteConfig(height=32, width=32, n_timestamps=4, initial_buildings=3, growth_rate=2,
                               min_size=3, max_size=8, noise_level=0.02)


@pytest.fixture
def labeled_site(small_site_config):
    return generate_synthetic_site(7, small_site_config, site_id="lab")


@pytest.fixture
def unlabeled_site(small_site_config):
    return generate_synthetic_site(8, small_site_config, site_id="unl", split="unlabeled")


# acceptance criteria record one verdict line each; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
