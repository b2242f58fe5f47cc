import pytest

from masan.config import ExperimentConfig, load_config

TINY = {
    "grid": "2,2,2",
    "batch_size": "2",
    "pretrain_steps": "3",
    "train_steps": "4",
    "synthetic.n_per_class": "4",
    "synthetic.extents": "8,8,8",
    "synthetic.frames": "2",
    "synthetic.signal_patches": "6,7",
    "encoder.channel_schedule": "2,4",
    "encoder.bottleneck_channels": "4",
    "mlp.hidden": "8",
    "fusion.reduction": "2",
}


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    """8^3 volumes on a 2x2x2 grid: one downsampling stage per patch."""
    return load_config(None, TINY)


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("# desk-test config\n" + "".join(f"{k} = {v}\n" for k, v in TINY.items()))
    return path
