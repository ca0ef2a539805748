import time

import numpy as np
import pytest

from spectraprune.tensorio import WeightStore


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_BUILD_SECONDS: dict[str, float] = {}


@pytest.fixture(scope="session")
def toy_checkpoints(tmp_path_factory):
    """(random_init_path, trained_path) from the reference training script."""
    from reference.toy_transformer import build

    t0 = time.perf_counter()
    paths = build(tmp_path_factory.mktemp("toy"))
    TOY_BUILD_SECONDS["build"] = time.perf_counter() - t0
    return paths


def llama_toy_store(seed=0, blocks=3, d_model=32, d_ff=64, dtype="f32"):
    """Random LLaMA-named store with heterogeneous per-block spectra."""
    rng = np.random.default_rng(seed)
    arrays = {"model.embed_tokens.weight": rng.standard_normal((50, d_model))}
    for i in range(blocks):
        p = f"model.layers.{i}."
        # scale a power of the singular values per block so the tails differ
        for name, shape in (
            ("self_attn.q_proj", (d_model, d_model)),
            ("self_attn.k_proj", (d_model, d_model)),
            ("mlp.up_proj", (d_ff, d_model)),
            ("mlp.down_proj", (d_model, d_ff)),
        ):
            w = rng.standard_normal(shape)
            u, s, vt = np.linalg.svd(w, full_matrices=False)
            s = s ** (1 + 1.5 * i / max(blocks - 1, 1))
            arrays[p + name + ".weight"] = (u * s) @ vt
        arrays[p + "input_layernorm.weight"] = np.ones(d_model)
    arrays["model.norm.weight"] = np.ones(d_model)
    arrays["lm_head.weight"] = rng.standard_normal((50, d_model))
    return WeightStore.from_arrays(arrays, dtype)


@pytest.fixture
def toy_store():
    return llama_toy_store()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
