import dataclasses
import json
import math
import warnings

import numpy as np
import pytest
import torch

from lgda.dataset import CUP, DISC, SHIFT_PRESETS, ImageSample, SynthConfig, generate_synthetic
from lgda.global_denoise import compute_prototypes
from lgda.local_denoise import CacheError, LocalCorrectionConfig, PseudoLabel, PseudoLabelCache, build_pseudolabel_cache
from lgda.sample_division import DivisionConfig, divide, score_images
from lgda.segmodel import (load_checkpoint, parameter_hash, pretrained_reference_backbone, to_tensor,
                           upsample_features)
from lgda.trainer import (COLUMNS, TrainConfig, TrainHistory, TrainingDivergedError, adapt, adaptation_loss,
                          evaluate, evaluate_predictions, predict_probs, pretrain_source)

import oracles


# ---------------------------------------------------------------- loss

def test_loss_zero_when_prediction_matches_binary_target(rng):
    p = (rng.uniform(size=(4, 4, 2)) > 0.5).astype(np.float32)
    assert float(adaptation_loss(p, PseudoLabel(p, soft=False))) < 1e-6


def test_loss_half_is_ln2(rng):
    p = (rng.uniform(size=(4, 4, 2)) > 0.5).astype(np.float32)
    assert float(adaptation_loss(np.full((4, 4, 2), 0.5, np.float32), p)) == pytest.approx(math.log(2), rel=1e-6)


def test_loss_matches_oracle_and_clamps(rng):
    p = rng.uniform(size=(2, 4, 4, 2))
    q = rng.uniform(size=(2, 4, 4, 2))
    q[0, 0, 0, 0] = 0.0
    got = float(adaptation_loss(torch.from_numpy(q).permute(0, 3, 1, 2), torch.from_numpy(p).permute(0, 3, 1, 2)))
    assert np.isfinite(got)
    assert got == pytest.approx(oracles.bce(p, q), rel=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        adaptation_loss(np.full((4, 4, 2), 0.5), np.zeros((4, 5, 2)))


def _fd_relative_error(dtype, seed):
    r = np.random.default_rng(seed)
    logits = torch.tensor(r.normal(size=(1, 2, 4, 4)), dtype=dtype, requires_grad=True)
    target = torch.tensor((r.uniform(size=(1, 2, 4, 4)) > 0.5), dtype=dtype)
    f = lambda z: adaptation_loss(torch.sigmoid(z), target)
    f(logits).backward()
    analytic = logits.grad.detach().clone().reshape(-1)
    h = 1e-6 if dtype == torch.float64 else 1e-2
    numeric = torch.zeros_like(analytic)
    flat = logits.detach().reshape(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        numeric[i] = (f(up.reshape(logits.shape)) - f(down.reshape(logits.shape))) / (2 * h)
    return float((analytic - numeric).norm() / numeric.norm())


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    assert _fd_relative_error(torch.float64, seed) <= 1e-6
    assert _fd_relative_error(torch.float32, seed) <= 1e-3


# ---------------------------------------------------------------- pretraining

def _single(size=32, seed=0):
    src, _ = generate_synthetic(SynthConfig(image_size=size, n_source=1, n_target=0, seed=seed))
    return src


def test_overfit_single_sample():
    model = pretrained_reference_backbone(feature_channels=16, dropout_rate=0.0, seed=0)
    cfg = TrainConfig(epochs_source=200, max_steps=200, augment_source=False, val_fraction=0.0, seed=0)
    _, hist = pretrain_source(model, _single(), cfg)
    assert len(hist) <= 200
    assert min(r["loss"] for r in hist.records) < 0.05


def test_pretrain_is_deterministic(tiny_data):
    src = tiny_data[0][:6]
    cfg = TrainConfig(epochs_source=2, batch_size=3, seed=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = pretrain_source(pretrained_reference_backbone(feature_channels=8, seed=1), src, cfg)
        b = pretrain_source(pretrained_reference_backbone(feature_channels=8, seed=1), src, cfg)
    assert a[1][-1]["loss"] == b[1][-1]["loss"]
    assert parameter_hash(a[0]) == parameter_hash(b[0])


def test_pretrain_rejects_unlabeled(tiny_data):
    with pytest.raises(ValueError):
        pretrain_source(pretrained_reference_backbone(feature_channels=8), [tiny_data[1][0].without_mask()])


def test_pretrain_outputs_and_reload(tiny_data, tmp_path):
    src = tiny_data[0][:6]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, hist = pretrain_source(pretrained_reference_backbone(feature_channels=8), src,
                                      TrainConfig(epochs_source=2, val_fraction=0.34), run_dir=tmp_path)
        assert (tmp_path / "ckpt_source.pt").exists()
        lines = (tmp_path / "history_source.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
        back = load_checkpoint(tmp_path / "ckpt_source.pt")
        assert evaluate(back, src).per_image == evaluate(model, src).per_image


def test_history_monotone():
    h = TrainHistory()
    h.append({"epoch": 1, "loss": 0.1})
    with pytest.raises(ValueError):
        h.append({"epoch": 1, "loss": 0.1})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(metric="dot")


# ---------------------------------------------------------------- adaptation

@pytest.fixture
def target_cache(tiny_model, tiny_data, tmp_path):
    targets = [s.without_mask() for s in tiny_data[1]]
    build_pseudolabel_cache(tiny_model, targets, 2, LocalCorrectionConfig(), tmp_path / "cache", seed=0)
    return targets, PseudoLabelCache(tmp_path / "cache")


def test_zero_epochs_is_identity(tiny_model, target_cache, tmp_path):
    targets, cache = target_cache
    adapted, hist = adapt(tiny_model, targets, cache, TrainConfig(epochs_adapt=0), run_dir=tmp_path / "run")
    assert len(hist) == 0
    assert parameter_hash(adapted) == parameter_hash(tiny_model)
    assert adapted is not tiny_model
    assert parameter_hash(load_checkpoint(tmp_path / "run" / "ckpt_adapted.pt")) == parameter_hash(tiny_model)


def test_one_epoch_changes_parameters_and_writes_outputs(tiny_model, target_cache, tmp_path):
    targets, cache = target_cache
    cfg = TrainConfig(epochs_adapt=2, batch_size=4)
    before = parameter_hash(tiny_model)
    adapted, hist = adapt(tiny_model, targets, cache, cfg, run_dir=tmp_path)
    assert parameter_hash(tiny_model) == before  # input untouched
    assert parameter_hash(adapted) != before
    assert [r["epoch"] for r in hist.records] == [1, 2]
    assert {"loss", "easy_count"} <= set(hist[0])
    for name in ("ckpt_adapted.pt", "history.jsonl", "prototypes.jsonl"):
        assert (tmp_path / name).exists()


def test_single_batch_prototypes_equal_direct_computation(tiny_model, target_cache):
    targets, cache = target_cache
    cfg = TrainConfig(epochs_adapt=3, batch_size=len(targets), prototype_momentum=0.0, adapt_dropout=False,
                      division=DivisionConfig(strategy="topk_fraction", fraction=0.5))
    by_id = {s.id: s for s in targets}
    seen = []

    def check(info):
        model = info["model"]
        batch = [by_id[i] for i in info["batch_ids"]]
        # independent recomputation from the pre-step model
        probs = predict_probs(model, targets)
        division = divide(score_images([s.id for s in targets], probs, cfg.division), cfg.division)
        with torch.no_grad():
            feats, _ = model(to_tensor(batch), dropout=False)
        feats = feats.permute(0, 2, 3, 1).numpy()
        easy = [(f, s) for f, s in zip(feats, batch) if division.is_easy(s.id)]
        if not easy:
            return
        direct = compute_prototypes([upsample_features(f, *s.shape) for f, s in easy],
                                    [cache.labels(s.id) for _, s in easy])
        np.testing.assert_array_equal(info["prototypes"].valid, direct.valid)
        ok = direct.valid
        np.testing.assert_allclose(info["prototypes"].f_obj[ok], direct.f_obj[ok], rtol=0, atol=1e-6)
        np.testing.assert_allclose(info["prototypes"].f_bck[ok], direct.f_bck[ok], rtol=0, atol=1e-6)
        seen.append(info["step"])

    adapt(tiny_model, targets, cache, cfg, callback=check)
    assert seen == [0, 1, 2]


def _noise_masks(samples, seed):
    r = np.random.default_rng(seed)
    out = []
    for s in samples:
        disc = r.uniform(size=s.shape) < 0.5
        cup = disc & (r.uniform(size=s.shape) < 0.5)
        mask = np.zeros(s.shape + (2,), np.uint8)
        mask[..., DISC], mask[..., CUP] = disc, cup
        out.append(ImageSample(s.id, s.image, mask, "target"))
    return out


def test_adapt_never_reads_target_masks(tiny_model, target_cache):
    targets, cache = target_cache
    cfg = TrainConfig(epochs_adapt=2, batch_size=4, seed=9)
    clean, _ = adapt(tiny_model, targets, cache, cfg)
    poisoned, _ = adapt(tiny_model, _noise_masks(targets, 1), cache, cfg)
    assert parameter_hash(clean) == parameter_hash(poisoned)


def test_adapt_rejects_mismatched_cache(tiny_model, target_cache):
    targets, cache = target_cache
    with pytest.raises(CacheError):
        adapt(tiny_model, targets[:-1], cache, TrainConfig(epochs_adapt=1))


def test_divergence_guard(tiny_model, target_cache):
    targets, cache = target_cache
    broken = pretrained_reference_backbone(feature_channels=8, seed=0)
    broken.load_state_dict(tiny_model.state_dict())
    with torch.no_grad():
        broken.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        adapt(broken, targets, cache, TrainConfig(epochs_adapt=1, global_correction=False))


def test_adaptation_is_reproducible(tiny_model, target_cache):
    targets, cache = target_cache
    cfg = TrainConfig(epochs_adapt=1, batch_size=4, seed=2)
    a, ha = adapt(tiny_model, targets, cache, cfg)
    b, hb = adapt(tiny_model, targets, cache, cfg)
    assert parameter_hash(a) == parameter_hash(b) and ha.records == hb.records


# ---------------------------------------------------------------- evaluation

def test_truth_against_itself(tiny_data):
    truths = [s.mask for s in tiny_data[1]]
    table = evaluate_predictions(truths, truths)
    assert table.summary["disc-Dice"][0] == 1.0 and table.summary["cup-Dice"][0] == 1.0
    assert table.summary["disc-ASD"][0] == 0.0 and table.summary["cup-ASD"][0] == 0.0
    assert tuple(table.summary) == COLUMNS == ("disc-Dice", "disc-ASD", "cup-Dice", "cup-ASD",
                                                 "avg-Dice", "avg-ASD")


def test_std_uses_n_minus_one(tiny_model, tiny_data):
    table = evaluate(tiny_model, tiny_data[1])
    values = [r["disc-Dice"] for r in table.per_image]
    assert table.summary["disc-Dice"][1] == pytest.approx(np.std(values, ddof=1))
    avg_dice = (table.summary["disc-Dice"][0] + table.summary["cup-Dice"][0]) / 2
    assert table.summary["avg-Dice"][0] == pytest.approx(avg_dice)
    assert table.row()["disc-Dice"][0] == pytest.approx(100 * table.summary["disc-Dice"][0])


def test_empty_prediction_is_skipped_with_warning(tiny_data):
    truths = [s.mask for s in tiny_data[1][:3]]
    preds = [t.copy() for t in truths]
    preds[0][..., CUP] = 0
    with pytest.warns(UserWarning, match="skipped"):
        table = evaluate_predictions(preds, truths)
    assert table.skipped == {"disc": 0, "cup": 1}
    assert table.per_image[0]["cup-ASD"] is None
    assert table.per_image[0]["cup-Dice"] == 0.0


def test_evaluate_errors(tiny_model, tiny_data):
    with pytest.raises(ValueError):
        evaluate(tiny_model, [])
    with pytest.raises(ValueError):
        evaluate(tiny_model, [tiny_data[1][0].without_mask()])
