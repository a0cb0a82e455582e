import logging
import math

import numpy as np
import pytest

from app.core.checkpoint import load_checkpoint
from app.core.data import decode_image, make_batch, toy_dataset
from app.core.errors import CheckpointError, DataError
from app.core.metrics import ConstantProbe
from app.core.tensor import Tape
from app.core.trainer import (
    LOSS_LOG_COLUMNS,
    CrossViewTrainer,
    evaluate,
    generate_images,
    load_model,
    read_loss_log,
    score_images,
    synthesize,
    train,
)
from tests.conftest import tiny_config


def snapshot(params):
    return {name: p.value.copy() for name, p in params.items()}


def test_training_writes_every_output(config, toy_samples):
    result = train(config, toy_samples)
    assert len(result.log) == 2
    assert [row.iter for row in result.log] == [1, 2]

    rows = read_loss_log(result.log_path)
    with open(result.log_path) as handle:
        assert handle.readline().strip() == ",".join(LOSS_LOG_COLUMNS)
    assert len(rows) == 2 and all(row["d2"] != "" for row in rows)

    assert result.checkpoints[0].endswith("checkpoint_epoch_001.xvfg")
    grid = decode_image(f"{config.output_dir}/samples/epoch_001.png")
    assert grid.shape == (3, 32, 4 * 32)

    stored = load_checkpoint(result.checkpoint_path)
    assert any(name.startswith("probe.") for name in stored)
    assert any(name.startswith("meta/") for name in stored)


def test_training_is_deterministic(tmp_path, toy_samples):
    first = train(tiny_config(), toy_samples, str(tmp_path / "a"))
    second = train(tiny_config(), toy_samples, str(tmp_path / "b"))
    with open(first.log_path, "rb") as a, open(second.log_path, "rb") as b:
        assert a.read() == b.read()
    with open(first.checkpoint_path, "rb") as a, open(second.checkpoint_path, "rb") as b:
        assert a.read() == b.read()


def test_baseline_log_leaves_d2_empty(tmp_path, toy_samples):
    result = train(tiny_config(ablation="A"), toy_samples, str(tmp_path / "run"))
    assert all(row.d2 is None for row in result.log)
    assert all(row["d2"] == "" for row in read_loss_log(result.log_path))
    assert all(row["d1"] != "" for row in read_loss_log(result.log_path))


def test_logged_total_matches_its_parts(tmp_path, toy_samples):
    config = tiny_config()
    w = config.loss_weights
    for row in train(config, toy_samples, str(tmp_path / "run")).log:
        expected = row.g_adv + row.l1_stage1 + row.l1_stage2 + w.lambda_tv * row.tv
        assert row.total == pytest.approx(expected, rel=1e-9)


def test_discriminator_step_leaves_generators_unchanged(toy_samples):
    trainer = CrossViewTrainer(tiny_config())
    batch = make_batch(toy_samples[:2])
    with Tape():
        fwd = trainer.forward(batch)
        generators = snapshot(trainer.model.generator_parameters())
        discriminators = snapshot(trainer.model.discriminator_parameters())

        trainer.discriminator_step(fwd)
        for name, p in trainer.model.generator_parameters().items():
            np.testing.assert_array_equal(p.value, generators[name])
        assert any(
            not np.array_equal(p.value, discriminators[name])
            for name, p in trainer.model.discriminator_parameters().items()
        )

        after_d = snapshot(trainer.model.discriminator_parameters())
        trainer.generator_step(fwd)
        for name, p in trainer.model.discriminator_parameters().items():
            np.testing.assert_array_equal(p.value, after_d[name])


def test_g2a_swaps_the_views(tmp_path, toy_samples):
    result = train(tiny_config(direction="g2a"), toy_samples, str(tmp_path / "run"))
    assert len(result.log) == 2
    assert result.model.config.direction == "g2a"
    assert all(math.isfinite(row.total) for row in result.log)


def test_size_mismatch_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="expects 32x32"):
        train(tiny_config(), toy_dataset(2, 64, seed=0), str(tmp_path / "run"))


def test_empty_dataset_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="empty"):
        train(tiny_config(), [], str(tmp_path / "run"))


def test_checkpoint_restores_model_and_probe(config, toy_samples):
    result = train(config, toy_samples)
    model, probe = load_model(result.checkpoint_path)
    batch = make_batch(toy_samples[:2])
    for restored, original in zip(synthesize(model, batch), synthesize(result.model, batch)):
        np.testing.assert_array_equal(restored, original)
    assert probe is not None
    np.testing.assert_array_equal(probe.predict(batch.target), result.probe.predict(batch.target))


def test_scoring_real_images_against_themselves(toy_samples, caplog):
    batch = make_batch(toy_samples)
    with caplog.at_level(logging.WARNING, logger="app.core.trainer"):
        row = score_images(batch.target, batch.target, batch.labels, ConstantProbe.uniform(4), "real", "a2g", 32)
    assert any("PSNR is reported as inf" in r.getMessage() for r in caplog.records)
    assert row.psnr == math.inf
    assert row.ssim == pytest.approx(1.0, abs=1e-12)
    assert row.kl_mean == pytest.approx(0.0, abs=1e-12)
    assert row.top5 == 1.0


def test_evaluate_reports_both_stages(config, toy_samples):
    result = train(config, toy_samples)
    rows = evaluate(result.checkpoint_path, toy_samples)
    assert [row.method for row in rows] == ["SGAN + AM + DC + LS", "SGAN + AM + DC + LS (stage 1)"]
    for row in rows:
        assert row.direction == "a2g" and row.size == 32
        assert -1.0 <= row.ssim <= 1.0
        assert 0.0 <= row.top1 <= row.top5 <= 1.0
        assert row.kl_mean >= 0.0

    again = evaluate(result.checkpoint_path, toy_samples)
    assert [r.model_dump() for r in again] == [r.model_dump() for r in rows]


def test_evaluate_fits_a_probe_when_none_is_available(tmp_path, toy_samples):
    result = train(tiny_config(probe_iterations=0), toy_samples, str(tmp_path / "run"))
    assert result.probe is None
    rows = evaluate(result.model, toy_samples)
    assert len(rows) == 2


def test_evaluate_rejects_a_size_mismatch(config, toy_samples):
    result = train(config, toy_samples)
    with pytest.raises(CheckpointError, match="trained at 32x32"):
        evaluate(result.checkpoint_path, toy_dataset(2, 64, seed=0))


def test_generate_writes_one_image_per_sample(config, toy_samples, tmp_path):
    result = train(config, toy_samples)
    paths = generate_images(result.checkpoint_path, toy_samples, str(tmp_path / "images"))
    assert [p.rsplit("/", 1)[-1] for p in paths] == [f"{s.id}.png" for s in toy_samples]
    assert decode_image(paths[0]).shape == (3, 32, 32)


def desk_run(seed, tmp_path):
    """1000 iterations of the full model on 64 toy scenes; returns (halved, refined_beats_coarse)"""
    config = tiny_config(
        seed=seed, depth=3, base_channels=8, feature_channels=16, disc_base_channels=8,
        batch_size=4, epochs=100, max_iterations=1000, probe_iterations=0, write_samples=False, log_every=100,
    )
    result = train(config, toy_dataset(64, 32, seed=seed), str(tmp_path / f"seed_{seed}"))
    log = result.log
    halved = len(log) >= 200 and log[199].total <= 0.5 * log[0].total

    held_out = make_batch(toy_dataset(16, 32, seed=seed + 100_000))
    coarse, fine = synthesize(result.model, held_out)
    refined_beats_coarse = np.mean(np.abs(fine - held_out.target)) < np.mean(np.abs(coarse - held_out.target))
    return halved, refined_beats_coarse


@pytest.mark.slow
def test_desk_training_majority_over_three_seeds(tmp_path):
    outcomes = [desk_run(seed, tmp_path) for seed in (0, 1, 2)]
    assert sum(halved for halved, _ in outcomes) >= 2, outcomes
    assert sum(refined for _, refined in outcomes) >= 2, outcomes
