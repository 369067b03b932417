import numpy as np

from rodspring import io
from rodspring.sim import PerturbationSchedule, sample_dataset


def test_dataset_roundtrip_is_exact(tmp_path, icosa_config):
    ds = sample_dataset(icosa_config, None, 4, 30, seed=2, perturbation=PerturbationSchedule(10, 5.0, rng_seed=1))
    man = io.save_dataset(ds, tmp_path, extra={"note": "x"})
    back = io.load_dataset(tmp_path)
    for k in ("p", "v", "q", "w", "force", "arm"):
        assert np.array_equal(getattr(back, k), getattr(ds, k)), k
    assert back.splits == ds.splits
    assert back.config.to_dict() == ds.config.to_dict()
    assert io.load_manifest(tmp_path / "manifest.json") == man
    assert man["note"] == "x" and man["config_hash"] == ds.config.config_hash()


def test_csv_headers(tmp_path, simple_data):
    io.save_dataset(simple_data, tmp_path)
    with open(tmp_path / "trajectories.csv") as fh:
        assert fh.readline().strip() == io.STATE_HEADER
    with open(tmp_path / "controls.csv") as fh:
        assert fh.readline().strip() == io.CONTROL_HEADER
