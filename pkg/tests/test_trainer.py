import numpy as np
import pytest

from satvdet import models, pipeline, synth, targets, trainer
from satvdet import tensorkit as tk
from satvdet.trainer import GridData, GridRow, TrainConfig, TrainingError


@pytest.fixture(scope="module")
def samples():
    video = synth.generate(synth.ScenarioSpec(height=64, width=64, n_frames=12, seed=3, n_vehicles=20,
                                              speed=(1.0, 2.0)))
    out = pipeline.video_samples(video, 3, 1, tile=32, register=False)
    assert len(out) >= 40
    return out


def _cfg(**kw):
    base = dict(channels=3, lr=1e-3, batch_size=8, patience=5, max_epochs=3, width=0.05, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.patience) == (1e-5, 32, 100)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="fine_tune")
    with pytest.raises(ValueError):
        TrainConfig(loss="l3")


def test_patience_one_returns_epoch_one_weights(samples, monkeypatch):
    seen = []
    real = trainer.dataset_loss
    val_series = iter([0.5, 0.7, 0.9, 0.9])

    def fake(weights, x, y, loss="mse", batch_size=32):
        if len(seen) == 0:
            seen.append(None)
            return real(weights, x, y, loss, batch_size)
        seen.append(weights.copy())
        return next(val_series)

    monkeypatch.setattr(trainer, "dataset_loss", fake)
    weights, log = trainer.train(_cfg(patience=1, max_epochs=10), samples[:16], samples[16:20])
    assert [e.epoch for e in log.epochs] == [1, 2]
    assert log.best_epoch == 1 and log.best_val_loss == 0.5
    assert "no validation improvement" in log.stopping_reason
    for a, b in zip(weights.params(), seen[1].params()):
        np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(weights.params(), seen[2].params()))


def test_improvement_must_exceed_minimum(samples, monkeypatch):
    vals = iter([0.5, 0.5 - 1e-8, 0.4])
    first = []

    def fake(weights, x, y, loss="mse", batch_size=32):
        if not first:
            first.append(1)
            return 1.0
        return next(vals)

    monkeypatch.setattr(trainer, "dataset_loss", fake)
    _, log = trainer.train(_cfg(patience=1, max_epochs=3), samples[:8], samples[8:10])
    assert len(log.epochs) == 2 and log.best_epoch == 1


def test_training_descends(samples):
    _, log = trainer.train(_cfg(max_epochs=4, lr=2e-3), samples[:-6], samples[-6:])
    assert log.train_losses()[-1] < log.initial_train_loss
    assert log.best_val_loss == min(log.val_losses())
    assert log.stopping_reason.startswith("reached max_epochs")


def test_training_is_deterministic(samples):
    cfg = _cfg(max_epochs=2, augmentation=True)
    w1, l1 = trainer.train(cfg, samples[:16], samples[16:20])
    w2, l2 = trainer.train(cfg, samples[:16], samples[16:20])
    assert l1.train_losses() == l2.train_losses() and l1.val_losses() == l2.val_losses()
    for a, b in zip(w1.params(), w2.params()):
        np.testing.assert_array_equal(a, b)


def test_train_preconditions(samples):
    with pytest.raises(TrainingError, match="at least one"):
        trainer.train(_cfg(), [], samples[:2])
    with pytest.raises(TrainingError, match="empty"):
        trainer.train(_cfg(), samples[:2], [])


def test_divergence_aborts(samples):
    bad = [s for s in samples[:4]]
    w = models.build(_cfg().descriptor())
    w.kernels[-1][:] = np.nan
    with pytest.raises(TrainingError, match="diverged"):
        trainer.train(_cfg(max_epochs=1), bad, bad, init_weights=w)


def test_fine_tune_preconditions(samples, tmp_path):
    cfg = _cfg()
    path = tmp_path / "w.bin"
    models.save(models.build(models.descriptor_for("foveanet4sat", 5, 0.05)), path)
    with pytest.raises(TrainingError, match="at least one"):
        trainer.fine_tune(path, [], cfg)
    with pytest.raises(TrainingError, match="c=5"):
        trainer.fine_tune(path, samples[:5], cfg)
    with pytest.raises(TrainingError, match="c=5"):
        trainer.fine_tune(models.load(path), samples[:5], cfg)


def test_fine_tune_starts_from_pretrained(samples, tmp_path):
    cfg = _cfg(max_epochs=1)
    pre, _ = trainer.train(_cfg(max_epochs=2, lr=2e-3), samples[:30], samples[30:34])
    path = tmp_path / "pre.bin"
    models.save(pre, path)
    _, log = trainer.fine_tune(path, samples[34:39], cfg)
    expected = trainer.dataset_loss(pre, *trainer.sample_arrays(samples[34:39], cfg.target_spec()))
    assert log.initial_train_loss == pytest.approx(expected, rel=1e-5)


def test_target_as_prediction_loss_is_zero(samples):
    spec = targets.target_spec_for("foveanet4sat")
    _, y = trainer.sample_arrays(samples[:8], spec)
    assert tk.mse_loss(y, y) == 0.0
    assert not tk.mse_loss_backward(y, y).any()


def test_log_text_and_file(samples, tmp_path):
    _, log = trainer.train(_cfg(max_epochs=2), samples[:8], samples[8:10])
    path = tmp_path / "log.txt"
    log.write(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("initial_train_loss=")
    assert lines[1].startswith("epoch=1 ") and lines[2].startswith("epoch=2 ")
    assert lines[-3] == f"best_epoch={log.best_epoch}"


# ---- grid ----------------------------------------------------------------

def test_population_std_of_constant_scores():
    rows = [GridRow("a", 5, r, 0.8, 0.8, 0.8, r) for r in range(3)]
    (mean, std), = trainer.summarize_grid(rows).values()
    assert mean == pytest.approx(0.8) and std == 0.0


def test_grid_aggregation_and_rerun_oracle(samples, tmp_path):
    data = GridData(samples[:30], samples[30:33], samples[33:40], alpha_n=0.3)
    cfg = _cfg(max_epochs=1)
    rows = trainer.run_config_grid({"c1": cfg}, data, [5], repeats=3, base_seed=7)
    assert [(r.config, r.n_samples, r.repeat) for r in rows] == [("c1", 5, 0), ("c1", 5, 1), ("c1", 5, 2)]
    assert len({r.seed for r in rows}) == 3
    (mean, std), = trainer.summarize_grid(rows).values()
    manual = [trainer.run_cell(cfg, data, 5, trainer.cell_seed(7, 0, 5, r)).f1 for r in range(3)]
    assert mean == pytest.approx(np.mean(manual), abs=1e-12)
    assert std == pytest.approx(np.std(manual), abs=1e-12)
    assert f"{std:.2f}" == f"{np.std(manual):.2f}"
    again = trainer.run_config_grid({"c1": cfg}, data, [5], repeats=3, base_seed=7)
    assert [r.f1 for r in again] == [r.f1 for r in rows]

    trainer.write_grid_csv(tmp_path / "g.csv", rows)
    head, *body = (tmp_path / "g.csv").read_text().splitlines()
    assert head == "config,n_samples,repeat,f1,precision,recall,seed" and len(body) == 3
    trainer.write_grid_summary(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().splitlines()[1].startswith("c1,5,")


def test_grid_records_failing_cell(samples, tmp_path):
    data = GridData(samples[:10], samples[10:12], samples[12:14])
    bad = TrainConfig(channels=3, width=0.05, max_epochs=1, mode="fine_tune", pretrained=str(tmp_path / "none.bin"))
    rows = trainer.run_config_grid({"bad": bad, "ok": _cfg(max_epochs=1)}, data, [3], repeats=1)
    assert rows[0].error and np.isnan(rows[0].f1)
    assert rows[1].error == "" and np.isfinite(rows[1].f1)


def test_evaluate_sweep_picks_best_threshold(samples):
    w = models.build(_cfg().descriptor())
    spec = targets.target_spec_for("foveanet4sat")
    _, y = trainer.sample_arrays(samples[:10], spec)
    res = trainer.evaluate(w, samples[:10], heatmaps=y[:, 0])
    assert res.f1 == 1.0 or res.f1 >= max(trainer.evaluate(w, samples[:10], alpha_n=a, heatmaps=y[:, 0]).f1
                                          for a in trainer.DEFAULT_SWEEP)
    assert trainer.evaluate(w, samples[:10], method="otsu", heatmaps=y[:, 0]).method == "otsu"
