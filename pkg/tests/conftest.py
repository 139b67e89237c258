import sys
import warnings

import numpy as np
import pytest
import torch

from portrait_completion.checkpoint import checkpoint_from_module
from portrait_completion.completion import Generator, GeneratorConfig
from portrait_completion.data import DatasetConfig, compute_mean_pixel, generate_synthetic_figures
from portrait_completion.face import FaceNet, face_net_config
from portrait_completion.parsing import ParsingNet, ParsingNetConfig

warnings.filterwarnings("ignore", message=".*detach.*")


def tiny_parsing_config(**kw):
    base = dict(backbone_channels=(8, 8, 8, 8), stage5_channels=8, aspp_channels=8,
                pose_channels=8, refine_channels=8)
    return ParsingNetConfig(**{**base, **kw})


def tiny_generator_config(**kw):
    base = dict(base_channels=4, n_front_resblocks=1, n_back_resblocks=1, dilation_rates=(2,))
    return GeneratorConfig(**{**base, **kw})


def tiny_face_config(**kw):
    return face_net_config(**{"base_channels": 4, **kw})


@pytest.fixture(scope="session")
def figures():
    return generate_synthetic_figures(8, 7, (64, 64))


@pytest.fixture(scope="session")
def data_config(figures):
    return DatasetConfig(image_size=(64, 64), mean_pixel=compute_mean_pixel(figures))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def untrained_nets():
    """Seeded, untrained parsing / generator / face checkpoints (tiny widths)."""
    torch.manual_seed(0)
    parsing = checkpoint_from_module(ParsingNet(tiny_parsing_config()), "parsing")
    generator = checkpoint_from_module(Generator(tiny_generator_config()), "generator")
    face = checkpoint_from_module(FaceNet(tiny_face_config()), "face")
    extrap = checkpoint_from_module(Generator(tiny_generator_config(extrapolation_mode=True)), "generator")
    return {"parsing": parsing, "generator": generator, "face": face, "extrap": extrap}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail, seconds in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s]")
