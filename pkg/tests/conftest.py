import dataclasses

import pytest
import torch

from spatial_distill.config import DatasetConfig, ModelConfig, RunConfig, model_config_for
from spatial_distill.dataset import build_dataset
from spatial_distill.model import init_params


@pytest.fixture(scope="session")
def small_ds():
    return build_dataset(DatasetConfig(n_scenes=8), seed=0)


@pytest.fixture(scope="session")
def small_cfg(small_ds):
    cfg = RunConfig(dataset=small_ds.config)
    cfg.train.epochs = 2
    cfg.train.learning_rate = 1e-3
    return cfg


def tiny_model_config(vocab_size=20, **overrides) -> ModelConfig:
    base = dict(
        n_layers=1,
        hidden_size=16,
        n_heads=2,
        mlp_dim=32,
        vocab_size=vocab_size,
        K=4,
        n_views=2,
        grid=4,
        feature_channels=3,
        spatial_grid=2,
        spatial_channels=2,
        vision_pool=2,
        vision_hidden=8,
        max_objects=3,
        n_categories=3,
        depth_bins=4,
        max_seq_len=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def small_model(small_ds):
    mcfg = model_config_for(small_ds.config, ModelConfig(), len(small_ds.vocab))
    return init_params(mcfg, seed=0)


def random_vision(cfg: ModelConfig, batch: int, gen: torch.Generator, dtype=torch.float32):
    f = torch.rand(batch, cfg.n_views, cfg.grid, cfg.grid, cfg.feature_channels, generator=gen, dtype=dtype)
    d = torch.rand(batch, cfg.n_views, cfg.grid, cfg.grid, generator=gen, dtype=dtype) * 3
    return f, d


__all__ = ["tiny_model_config", "random_vision", "dataclasses"]


# ----------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    entry = ACCEPTANCE.setdefault(n, {"name": name, "ok": True, "detail": ""})
    if report.failed:
        entry["ok"] = False
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['name']}  {e['detail']}")
