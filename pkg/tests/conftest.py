import pytest
import torch
from hypothesis import HealthCheck, settings

from ovarkit.pipeline import load_benchmark
from ovarkit.synth import SynthConfig, generate

settings.register_profile(
    "suite", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

torch.set_num_threads(max(1, torch.get_num_threads()))


MICRO = SynthConfig(n_det=24, n_attr=24, n_cap=14, n_test=12,
                    captions_per_image=2)


@pytest.fixture(scope="session")
def micro_dir(tmp_path_factory):
    """A small on-disk benchmark shared by IO/parse/train smoke tests."""
    out = tmp_path_factory.mktemp("micro") / "bench"
    generate(MICRO, seed=7, out_dir=out)
    return out


@pytest.fixture(scope="session")
def micro_bench(micro_dir):
    return load_benchmark(micro_dir)
