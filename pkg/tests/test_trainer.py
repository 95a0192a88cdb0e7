import copy
import json
import math

import pytest
import torch

from spatial_distill import losses as L
from spatial_distill.config import ALL_LOSSES, ModelConfig, RunConfig, model_config_for
from spatial_distill.model import init_params
from spatial_distill.trainer import (
    Batcher,
    Objective,
    TrainingDivergedError,
    compute_bundle,
    load_checkpoint,
    lr_at,
    run_model,
    train,
    validate,
)


def _cfg(ds, **train_kw) -> RunConfig:
    cfg = RunConfig(dataset=ds.config)
    cfg.model = ModelConfig(n_layers=1, hidden_size=32, n_heads=2, mlp_dim=64, K=4)
    cfg.train.epochs = 2
    cfg.train.learning_rate = 1e-3
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


def test_lr_schedule_examples():
    assert lr_at(10, 100, 10, 1e-3) == 1e-3
    assert lr_at(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(55, 100, 10, 1e-3) == pytest.approx(0.5e-3)
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(5, 100, 10, 1e-3) == pytest.approx(0.5e-3)


def test_lr_schedule_monotone_after_warmup():
    values = [lr_at(s, 50, 5, 1.0) for s in range(5, 51)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_uncertainty_at_unit_sigma_matches_half_static(small_ds):
    cfg = _cfg(small_ds)
    mcfg = model_config_for(small_ds.config, cfg.model, len(small_ds.vocab))
    model = init_params(mcfg, 0)
    batch = Batcher(small_ds, mcfg).batch([0, 1, 2])
    bundle = compute_bundle(run_model(model, batch), batch, cfg)
    unc = L.uncertainty_total(bundle, L.UncertaintyParams(list(bundle)))
    static = L.static_total(bundle, {k: 0.5 for k in bundle})
    assert unc.item() == pytest.approx(static.item(), rel=1e-6)


def test_disabling_loss_removes_term_and_sigma(small_ds):
    cfg = _cfg(small_ds)
    cfg.train.enabled_losses = tuple(k for k in ALL_LOSSES if not k.startswith("depth"))
    obj = Objective(cfg)
    assert not any(k.startswith("depth") for k in obj.uncertainty.log_sigma)
    mcfg = model_config_for(small_ds.config, cfg.model, len(small_ds.vocab))
    _, bundle = obj(init_params(mcfg, 0), Batcher(small_ds, mcfg).batch([0, 1]))
    assert set(bundle) == set(cfg.train.enabled_losses)


def test_static_mode_has_no_sigma(small_ds):
    cfg = _cfg(small_ds, loss_mode="static")
    obj = Objective(cfg)
    assert obj.uncertainty is None
    assert obj.weights() == {k: 1.0 for k in ALL_LOSSES}


def test_deterministic_loss_logs(small_ds, tmp_path):
    cfg = _cfg(small_ds)
    train(small_ds, copy.deepcopy(cfg), tmp_path / "a")
    train(small_ds, copy.deepcopy(cfg), tmp_path / "b")
    assert (tmp_path / "a" / "loss_log.jsonl").read_bytes() == (tmp_path / "b" / "loss_log.jsonl").read_bytes()


def test_run_directory_layout(small_ds, tmp_path):
    _, _, record = train(small_ds, _cfg(small_ds), tmp_path)
    for name in ("config.yaml", "loss_log.jsonl", "run_record.json", "checkpoints/best.pt", "checkpoints/last.pt"):
        assert (tmp_path / name).exists(), name
    lines = (tmp_path / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == record.steps
    entry = json.loads(lines[0])
    assert set(entry["losses"]) == set(ALL_LOSSES)
    assert set(entry["weights"]) == set(ALL_LOSSES)


def test_checkpoint_round_trip(small_ds, tmp_path):
    cfg = _cfg(small_ds)
    _, _, record = train(small_ds, cfg, tmp_path)
    model, obj, payload = load_checkpoint(tmp_path / "checkpoints" / "best.pt")
    assert payload["optimizer"] is not None
    _, val_idx = small_ds.split(cfg.train.val_frac, cfg.train.seed)
    val = validate(model, obj, Batcher(small_ds, model.cfg), val_idx, cfg.train.batch_size)
    assert val == pytest.approx(record.best_val_loss, abs=1e-6)


def test_weights_positive_and_finite(small_ds):
    _, _, record = train(small_ds, _cfg(small_ds))
    for traj in record.weight_trajectories.values():
        assert traj and all(w > 0 and math.isfinite(w) for w in traj)


def test_nan_aborts_with_step(small_ds, monkeypatch):
    import spatial_distill.trainer as T

    real = T.compute_bundle
    calls = {"n": 0}

    def poisoned(out, batch, cfg, enabled):
        bundle = real(out, batch, cfg, enabled)
        calls["n"] += 1
        if calls["n"] == 3:
            bundle["depth_reg"] = bundle["depth_reg"] * float("nan")
        return bundle

    monkeypatch.setattr(T, "compute_bundle", poisoned)
    with pytest.raises(TrainingDivergedError, match=r"step 2: .*depth_reg"):
        train(small_ds, _cfg(small_ds))


def test_nan_parameter_reports_layer(small_ds):
    cfg = _cfg(small_ds)
    mcfg = model_config_for(small_ds.config, cfg.model, len(small_ds.vocab))
    model = init_params(mcfg, 0)
    with torch.no_grad():
        model.thinking_tokens.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        train(small_ds, cfg, model=model)


def test_empty_loss_set_rejected(small_ds):
    from spatial_distill.config import ConfigError

    with pytest.raises(ConfigError):
        train(small_ds, _cfg(small_ds, enabled_losses=()))


def test_gradient_isolation_during_training_step(small_ds):
    cfg = _cfg(small_ds, loss_mode="static")
    cfg.loss.static_weights = {k: (0.0 if k == "text" else 1.0) for k in ALL_LOSSES}
    mcfg = model_config_for(small_ds.config, cfg.model, len(small_ds.vocab))
    model = init_params(mcfg, 0)
    total, _ = Objective(cfg)(model, Batcher(small_ds, mcfg).batch([0, 1, 2, 3]))
    total.backward()
    assert model.thinking_tokens.grad is None or torch.count_nonzero(model.thinking_tokens.grad) == 0
