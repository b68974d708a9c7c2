import numpy as np
import pytest

from rfcam.detector import DetectionConfig
from rfcam.fixtures import FixtureSpec, fixture_gen
from rfcam.gbdt import BoostConfig
from rfcam.pipeline import run_detection, train_surrogates

SMALL_SPEC = FixtureSpec(seed=42, train_per_class=80, test_per_class=25)


class SmallRun:
    """One reduced fixture-gen -> train -> detect pipeline shared across tests."""

    def __init__(self, root):
        self.root = root
        self.bundle_dir = root / "bundle"
        self.out_dir = root / "run"
        self.spec = SMALL_SPEC
        self.bundle, self.truth = fixture_gen(self.spec, self.bundle_dir)
        self.models = train_surrogates(self.bundle, BoostConfig())
        self.config = DetectionConfig()
        self.records, self.report = run_detection(
            self.bundle, self.models, self.config, self.out_dir
        )
        self.by_id = {r.instance_id: r for r in self.records}

    def flagged_reliant_record(self):
        for r in self.records:
            if r.flagged and self.truth.is_spurious_reliant[r.instance_id]:
                return r
        raise AssertionError("small fixture produced no flagged spurious-reliant record")


@pytest.fixture(scope="session")
def small_run(tmp_path_factory) -> SmallRun:
    return SmallRun(tmp_path_factory.mktemp("small_run"))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
