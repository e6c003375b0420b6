import numpy as np
import pytest

from chal_lens.data import (
    BACKGROUND_FLAGS,
    GLOBAL_FLAGS,
    INSTRUMENT_FLAGS,
    ChallengeDataset,
    ImageRecord,
    InstanceOutcome,
    InstanceRecord,
    PatientRecord,
)
from chal_lens.simulate import SimConfig, simulate_dataset


def make_dataset(instance_counts, n_algorithms=2, n_patients=2, seed=0, with_outcomes=True):
    """Dataset with images holding ``instance_counts[i]`` instances and random flags."""
    rng = np.random.default_rng(seed)
    algs = [f"a{k}" for k in range(n_algorithms)]
    patients = [PatientRecord(f"p{k}") for k in range(n_patients)]
    images, outcomes = [], []
    for i, n in enumerate(instance_counts):
        iid = f"im{i:05d}"
        insts = []
        for j in range(n):
            flags = [bool(v) for v in rng.random(len(INSTRUMENT_FLAGS)) < 0.3]
            if n < 2:
                flags[INSTRUMENT_FLAGS.index("in_covered_by_instrument")] = False
            insts.append(InstanceRecord(str(j + 1), tuple(flags)))
            if with_outcomes:
                for a in algs:
                    tp, fp, fn = (int(v) for v in rng.integers(0, 50, 3))
                    outcomes.append(InstanceOutcome(iid, str(j + 1), a, tp, fp, fn + 1))
        g = tuple(bool(v) for v in rng.random(len(GLOBAL_FLAGS)) < 0.3)
        b = tuple(bool(v) for v in rng.random(len(BACKGROUND_FLAGS)) < 0.3)
        images.append(ImageRecord(iid, patients[i % n_patients].patient_id, g, b, tuple(insts)))
    return ChallengeDataset(patients, algs, images, outcomes)


def paper_cardinality_dataset(with_outcomes=True):
    """2,728 images: 1,184 with one instrument, 1,031 holding 2,118 instruments, 513 with none."""
    multi = [2] * (1031 - 56) + [3] * 56
    assert sum(multi) == 2118
    counts = [1] * 1184 + multi + [0] * 513
    return make_dataset(counts, n_algorithms=5, n_patients=10, seed=1, with_outcomes=with_outcomes)


@pytest.fixture(scope="session")
def small_sim():
    cfg = SimConfig(seed=11, n_algorithms=3, n_patients=4, images_per_patient=8)
    return simulate_dataset(cfg)


@pytest.fixture(scope="session")
def gaussian_sim():
    cfg = SimConfig(seed=5, n_algorithms=3, n_patients=5, images_per_patient=10, family="gaussian", sigma_eps=0.5)
    return simulate_dataset(cfg)


# acceptance criterion number -> (status, title, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
