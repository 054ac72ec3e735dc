import numpy as np
import pytest

import ctxforest as cf

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance summary")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_volume(seed=0, dims=(7, 6, 5), spacing=(0.9, 1.1, 1.4),
                 origin=(-2.0, 3.0, 0.5)):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.0, 200.0, size=int(np.prod(dims))).astype(np.float32)
    return cf.Volume(dims, spacing, origin, data)


BONE_PALETTE = {0: "background", 1: "femur", 2: "tibia", 3: "patella"}


def make_context(seed=0, dims=(7, 6, 5), spacing=(0.8, 1.1, 1.3),
                 origin=(-1.0, 2.0, 0.5), n_lm=5, pool_size=10,
                 intensity=None):
    """Random volume with one voxel per bone; band wide enough to cover
    the whole grid so any index is valid in feature tests."""
    from ctxforest.distance import BONE_NAMES

    rng = np.random.default_rng(seed)
    n = int(np.prod(dims))
    data = rng.normal(100, 30, n) if intensity is None else intensity
    vol = cf.Volume(dims, spacing, origin, data)
    labels = np.zeros(n, dtype=np.uint8)
    spots = rng.choice(n, size=3, replace=False)
    labels[spots] = [1, 2, 3]
    mask = cf.LabelVolume(dims, spacing, origin, labels, BONE_PALETTE)
    lms = cf.LandmarkSet({b: rng.uniform(-30, 30, (n_lm, 3)) for b in BONE_NAMES})
    cfg = cf.FeatureConfig(pool_size=pool_size, r_max_mm=4.0,
                           band_tau_in_mm=50.0, band_tau_out_mm=50.0, seed=seed)
    return cf.FeatureContext(vol, mask, lms, cfg)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Tiny on-disk dataset (4 subjects x 1 scan, 40^3) for harness and
    CLI tests."""
    root = tmp_path_factory.mktemp("mini_ds")
    spec = cf.PhantomSpec(seed=21, dims=(40, 40, 40),
                          centers_mm=((20.0, 23.0, 29.0), (20.0, 23.0, 9.0),
                                      (20.0, 8.0, 26.0)),
                          radii_mm=((10.0, 7.0, 7.5), (9.5, 7.5, 6.5),
                                    (5.0, 4.2, 5.5)),
                          subject_jitter_mm=1.0, radius_jitter_mm=0.7,
                          landmarks_per_bone=16)
    rows = cf.generate_dataset(spec, n_subjects=4, out_dir=root,
                               volumes_per_subject=1)
    return root, rows


@pytest.fixture(scope="session")
def mini_cases(mini_dataset):
    _root, rows = mini_dataset
    feat = cf.FeatureConfig(seed=3, pool_size=20)
    from ctxforest.eval import load_cases

    return rows, feat, load_cases(rows, feat)
