import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import pytest

from config import ConfigError, RunConfig, _as_bool, parse_config


def test_defaults_pin_the_published_hyperparameters():
    cfg = RunConfig()
    assert cfg.tau == 0.07
    assert cfg.momentum == 0.99
    assert cfg.queue_size == 9600
    assert cfg.grid_size == 4
    assert cfg.sa_layers == 4
    assert cfg.topk == 1
    assert (cfg.mask_prob, cfg.mask_len) == (0.08, 10)
    assert cfg.tau_pred == 0.1
    assert cfg.swap_prob == 0.15
    assert cfg.mode == "in_batch"
    assert cfg.pred_loss_weight == 0.0


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("")
    assert parse_config(path) == RunConfig()
    assert parse_config(None).tau == 0.07


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nqueue_size = 256\nmode=queue  # momentum queues\n\nepochs=3\n")
    cfg = parse_config(path, ["epochs=5", "proj_heads=yes"])
    assert cfg.queue_size == 256 and cfg.mode == "queue"
    assert cfg.epochs == 5
    assert cfg.proj_heads is True


def test_unknown_key_names_the_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("tau=0.1\nwarmup=3\n")
    with pytest.raises(ConfigError) as e:
        parse_config(path)
    assert f"{path}:2" in str(e.value) and "warmup" in str(e.value)


@pytest.mark.parametrize("item,fragment", [
    ("tau=0", "must be > 0"),
    ("epochs=many", "cannot read"),
    ("proj_heads=maybe", "cannot read"),
    ("mode=momentum", "in_batch or queue"),
    ("mask_prob=1.5", "[0, 1]"),
    ("tau", "expected key=value"),
])
def test_bad_overrides_are_rejected(item, fragment):
    with pytest.raises(ConfigError) as e:
        parse_config(None, [item])
    assert "--set #1" in str(e.value)
    assert fragment in str(e.value)


def test_cross_field_checks():
    with pytest.raises(ConfigError):
        RunConfig(width=30, heads=4)
    with pytest.raises(ConfigError):
        RunConfig(image_size=6, grid_size=4)
    with pytest.raises(ConfigError):
        RunConfig(modality="fused", seq_len=40, max_seq_len=64)
    assert RunConfig(modality="fused", seq_len=32, max_seq_len=64).modality == "fused"
    with pytest.raises(ConfigError) as e:
        RunConfig(mode="queue", queue_size=4, batch_size=8)
    assert "queue_size=4" in str(e.value)
    assert RunConfig(mode="in_batch", queue_size=4, batch_size=8).batch_size == 8


def test_missing_config_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "absent.cfg")


def test_as_bool():
    assert _as_bool("Yes") and _as_bool(" on ")
    assert not _as_bool("0")
    assert _as_bool(None, default=True)
