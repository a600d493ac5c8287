import os

import numpy as np
import pytest

os.environ.setdefault("SIPL_KIT_THREADS", "1")

from sipl_kit import degrade, substrate  # noqa: E402
from sipl_kit.backbone import BackboneConfig  # noqa: E402
from sipl_kit.restore import RestorationModel  # noqa: E402

substrate.apply_thread_cap()

TINY = dict(base_channels=8, n_scales=2, blocks_per_scale=1)

# Verdict lines collected by the acceptance tests; printed after the run so
# they survive pytest's stdout capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance criteria", sep="-")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_model(fusion_mode="proxy", seed=0, n_dict_entries=8):
    return RestorationModel(BackboneConfig(**TINY), fusion_mode=fusion_mode,
                            n_dict_entries=n_dict_entries, init_seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_pair(seed=0, hw=32, template=None):
    template = template or degrade.desk_templates()[0]
    clean = degrade.gen_clean(seed, hw, hw)
    spec = template.spec(substrate.derive_seed(seed, "pair"))
    return degrade.SamplePair(clean, degrade.apply_degradation(clean, spec), spec, 0)


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """2 tasks x 10 pairs at 32x32: 8 train / 1 val / 1 test per task."""
    root = tmp_path_factory.mktemp("mini_corpus")
    return degrade.build_corpus(str(root), degrade.desk_templates(), 10, 0,
                                img_hw=(32, 32))
