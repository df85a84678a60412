from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from paramdelta.dtypes import DType  # noqa: E402
from paramdelta.generate import GenSpec, PlantSpec, generate  # noqa: E402

from acceptance_log import LINES as ACCEPTANCE_LINES  # noqa: E402


@pytest.fixture
def gen(tmp_path):
    """Write a generated checkpoint into the test's temp dir and open it."""

    def _gen(name: str = "ck", **kwargs):
        plant = kwargs.pop("plant", None)
        if isinstance(plant, dict):
            plant = PlantSpec.from_dict(plant)
        if isinstance(kwargs.get("dtype"), str):
            kwargs["dtype"] = DType.parse(kwargs["dtype"])
        return generate(GenSpec(plant=plant, **kwargs), tmp_path / f"{name}.safetensors")

    return _gen


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def large_pair(tmp_path_factory):
    """A base/post pair whose files are at least 8x their largest tensor.

    The largest tensor (8 MiB as float32) is big relative to the streaming
    window, as real checkpoints are.
    """
    d = tmp_path_factory.mktemp("large")
    dims = dict(layers=3, hidden_dim=512, ffn_dim=2048, vocab_size=4096, dtype=DType.F32)
    base = generate(GenSpec(seed=1, **dims), d / "base.safetensors")
    post = generate(GenSpec(seed=1, plant=PlantSpec(seed=2), **dims), d / "post.safetensors")
    return base, post, d
