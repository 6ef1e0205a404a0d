import itertools
import math

import numpy as np
import pytest

from gpaformer.data import LabeledSample, Volume, phantom_generate
from gpaformer.harness import (
    EvalResult,
    NumericalError,
    TrainConfig,
    evaluate,
    sliding_window_infer,
    tile_starts,
    train,
)
from gpaformer.losses import one_hot
from gpaformer.network import Model, ModelConfig

TINY = ModelConfig(stage_dims=(4, 8, 16), decoder_dim=8, window=(16, 16, 16), enable_masa=False, num_classes=3)


def tiny_data(n=3, seed=100):
    return [phantom_generate(seed + i, (16, 16, 16), 3, 1, radius_range=(2.5, 4.0)) for i in range(n)]


def tiny_cfg(**kw):
    base = dict(crop_dims=(16, 16, 16), validate_every=2, max_iterations=6, patience=10, seed=0)
    return TrainConfig(**{**base, **kw})


class LabelOracle:
    """Returns large logits for the class given by a label map at the tile's position."""

    def __init__(self, labels, num_classes):
        self.labels = labels
        self.c = num_classes

    def __call__(self, tile):
        # the tile is the label map itself (image == labels in these fixtures)
        return one_hot(np.rint(tile[0]).astype(int), self.c) * 10.0


# -- config ----------------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"batch_size": 2}, {"patience": 0}, {"validate_every": 0}, {"lr": 0.0}])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.validate_every, cfg.patience) == (1e-4, 1, 500, 10)


# -- training loop ---------------------------------------------------------------------------

def test_max_iterations_dominates():
    model = Model.create(TINY, 0)
    state = train(model, tiny_data(), tiny_data(1, 200), tiny_cfg(max_iterations=3, validate_every=500))
    assert state.iteration == 3
    assert state.val_history == []
    assert all(p.step_count == 3 for p in model.params.values())


def test_patience_one_stops_at_second_validation():
    model = Model.create(TINY, 0)
    state = train(model, tiny_data(), tiny_data(1, 200), tiny_cfg(patience=1, max_iterations=100),
                  val_metric=lambda m: 0.5)
    assert len(state.val_history) == 2
    assert state.iteration == 4
    assert state.stopped_early


def test_never_exceeds_patience_window_after_best():
    metrics = iter([0.1, 0.3, 0.2, 0.3, 0.25, 0.29, 0.9, 0.9])
    model = Model.create(TINY, 0)
    cfg = tiny_cfg(patience=3, validate_every=2, max_iterations=100)
    state = train(model, tiny_data(), tiny_data(1, 200), cfg, val_metric=lambda m: next(metrics))
    assert state.best_iteration == 4
    assert state.iteration - state.best_iteration == cfg.patience * cfg.validate_every
    assert state.validations_since_best == cfg.patience


def test_loss_trace_deterministic():
    traces = []
    for _ in range(2):
        model = Model.create(TINY, 0)
        traces.append(train(model, tiny_data(), tiny_data(1, 200), tiny_cfg(max_iterations=10,
                                                                             validate_every=100)).loss_history)
    assert traces[0] == traces[1]
    assert len(traces[0]) == 10


def test_non_finite_loss_aborts():
    model = Model.create(TINY, 0)
    model.params["decoder.head.bias"].value.data[...] = np.nan
    with pytest.raises(NumericalError) as info:
        train(model, tiny_data(), tiny_data(1, 200), tiny_cfg())
    assert info.value.iteration == 1
    assert "iteration 1" in str(info.value)


def test_needs_samples():
    with pytest.raises(ValueError):
        train(Model.create(TINY, 0), [], tiny_data(1), tiny_cfg())


def test_best_checkpoint_round_trip(tmp_path):
    model = Model.create(TINY, 0)
    val = tiny_data(2, 300)
    ckpt = tmp_path / "best.ckpt"
    state = train(model, tiny_data(), val, tiny_cfg(max_iterations=4), checkpoint=ckpt)
    reloaded = Model.load(ckpt)
    model.load_snapshot(state.best_params)
    a = evaluate(model, val, 3, (16, 16, 16)).mean
    b = evaluate(reloaded, val, 3, (16, 16, 16)).mean
    assert a == b == state.best_val_dsc


# -- sliding window ----------------------------------------------------------------------------

def test_tile_starts_cover_extent():
    assert tile_starts(10, 4, 2) == [0, 2, 4, 6]
    assert tile_starts(11, 4, 3) == [0, 3, 6, 7]
    assert tile_starts(4, 4, 2) == [0]


def test_single_window_equals_forward():
    model = Model.create(TINY, 1)
    vol = np.random.default_rng(0).random((1, 16, 16, 16), dtype=np.float32)
    np.testing.assert_array_equal(sliding_window_infer(model, vol, (16, 16, 16), 0.0), model(vol))


def test_constant_model_gives_constant_logits():
    vol = np.random.default_rng(1).random((1, 13, 9, 20))
    out = sliding_window_infer(lambda t: np.full((2,) + t.shape[1:], 3.25), vol, (8, 4, 8), 0.5)
    assert out.shape == (2, 13, 9, 20)
    np.testing.assert_allclose(out, 3.25, rtol=1e-15)


def test_overlapping_tiles_match_manual_accumulation():
    vol = np.arange(12, dtype=np.float64).reshape(1, 12, 1, 1)

    def model(tile):
        return tile * 2 + tile[0, 0, 0, 0]  # depends on the tile origin

    out = sliding_window_infer(model, vol, (8, 1, 1), 0.5)
    acc = np.zeros(12)
    cnt = np.zeros(12)
    for s in (0, 4):  # stride 4 over extent 12
        tile = vol[:, s:s + 8]
        acc[s:s + 8] += model(tile)[0, :, 0, 0]
        cnt[s:s + 8] += 1
    np.testing.assert_allclose(out[0, :, 0, 0], acc / cnt, rtol=1e-15)


def test_exact_tiling_is_concatenation():
    rng = np.random.default_rng(2)
    vol = rng.random((1, 8, 8, 8))

    def model(tile):
        return np.stack([np.sin(tile[0] * 3 + tile.sum()), tile[0]])

    out = sliding_window_infer(model, vol, (4, 4, 4), 0.0)
    for i, j, k in itertools.product((0, 4), repeat=3):
        sl = (slice(None), slice(i, i + 4), slice(j, j + 4), slice(k, k + 4))
        np.testing.assert_array_equal(out[sl], model(vol[sl]))


def test_reflection_padding_for_small_volume():
    vol = np.random.default_rng(3).random((1, 6, 8, 8))
    out = sliding_window_infer(lambda t: t * 1.0, vol, (8, 8, 8), 0.5)
    np.testing.assert_allclose(out, vol, rtol=1e-15)


def test_window_too_large_rejected():
    with pytest.raises(ValueError):
        sliding_window_infer(lambda t: t, np.zeros((1, 3, 8, 8)), (8, 8, 8))


def test_overlap_range():
    with pytest.raises(ValueError):
        sliding_window_infer(lambda t: t, np.zeros((1, 8, 8, 8)), (8, 8, 8), 1.0)


# -- evaluation --------------------------------------------------------------------------------

def _label_samples():
    rng = np.random.default_rng(4)
    out = []
    for i in range(3):
        labels = rng.integers(0, 3, size=(8, 8, 8))
        out.append(LabeledSample(Volume(labels.astype(np.float32)), Volume(labels), f"s{i}"))
    return out


def test_ground_truth_model_scores_one():
    samples = _label_samples()
    result = evaluate(LabelOracle(None, 3), samples, 3, (4, 4, 4))
    assert all(d == 1.0 for _, _, d in result.records)
    assert result.mean == 1.0


def test_background_model_scores_zero():
    samples = _label_samples()
    result = evaluate(lambda t: one_hot(np.zeros(t.shape[1:], int), 3), samples, 3, (8, 8, 8))
    assert all(d == 0.0 for _, _, d in result.records)


def test_grand_mean_is_mean_of_class_means():
    rng = np.random.default_rng(5)
    records = [(f"s{i}", c, float(rng.random())) for i in range(7) for c in (1, 2, 3)]
    res = EvalResult(4, records)
    per = [np.mean([d for _, cc, d in records if cc == c]) for c in (1, 2, 3)]
    assert abs(res.mean - sum(per) / 3) <= 1e-9
    assert res.table().splitlines()[0].split("\t") == ["class1", "class2", "class3", "mean"]
    assert len(res.record_lines().splitlines()) == 21


def test_record_lines_format():
    res = EvalResult(2, [("a", 1, 0.5)])
    assert res.record_lines() == "a\t1\t0.5\n"
    assert math.isclose(float(res.table().splitlines()[1].split("\t")[-1]), 0.5)
