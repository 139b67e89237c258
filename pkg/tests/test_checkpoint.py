import numpy as np
import pytest
import torch

from conftest import tiny_generator_config, tiny_parsing_config
from portrait_completion.checkpoint import (
    Checkpoint,
    checkpoint_from_module,
    load_checkpoint,
    module_from_checkpoint,
    save_checkpoint,
)
from portrait_completion.completion import Generator
from portrait_completion.errors import CheckpointError
from portrait_completion.parsing import ParsingNet, train_parsing


def test_round_trip_is_exact(tmp_path, figures, data_config):
    ck = train_parsing(figures[:2], tiny_parsing_config(), None, 1, 0, data_config)
    path = save_checkpoint(ck, tmp_path / "p.npz")
    back = load_checkpoint(path, "parsing")
    assert (back.kind, back.config, back.trace, back.meta) == (ck.kind, ck.config, ck.trace, ck.meta)
    assert all(np.array_equal(back.params[k], v) for k, v in ck.params.items())
    assert back.param_digest() == ck.param_digest()
    assert np.array_equal(back.rng_state["torch"], ck.rng_state["torch"])
    assert back.rng_state["numpy"] == ck.rng_state["numpy"]


def test_rebuilt_module_matches(tmp_path):
    torch.manual_seed(0)
    g = Generator(tiny_generator_config()).eval()
    path = save_checkpoint(checkpoint_from_module(g, "generator"), tmp_path / "g.npz")
    g2 = module_from_checkpoint(load_checkpoint(path))
    x = torch.randn(1, 7, 16, 16)
    with torch.no_grad():
        assert torch.equal(g(x), g2(x))


def test_truncated_file(tmp_path):
    path = save_checkpoint(checkpoint_from_module(ParsingNet(tiny_parsing_config()), "parsing"), tmp_path / "p.npz")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.npz")


def test_kind_mismatch(tmp_path):
    path = save_checkpoint(checkpoint_from_module(ParsingNet(tiny_parsing_config()), "parsing"), tmp_path / "p.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "generator")
    with pytest.raises(CheckpointError):
        Checkpoint("critic", {}, {})


def test_params_must_fit_config():
    ck = checkpoint_from_module(Generator(tiny_generator_config()), "generator")
    ck.config["base_channels"] = 8
    with pytest.raises(CheckpointError):
        module_from_checkpoint(ck)
