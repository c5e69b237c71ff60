import numpy as np
import pandas as pd
import pytest

from quicknat.core.exceptions import DataError, NumericalError
from quicknat.engine.tensor import Tensor
from quicknat.models.network import NetworkPreset
from quicknat.models.training import OptimizerState, Schedule, TrainRun, EpochRecord
from quicknat.models.volumes import LabelSpace, PhantomSpec, View
from quicknat.services.checkpoint_service import load_checkpoint
from quicknat.services.network_service import ViewNetwork, init_params
from quicknat.services.phantom_service import phantom_cohort
from quicknat.services.trainer_service import (
    SliceDataset,
    TrainingData,
    sgd_momentum_step,
    train_only_manual,
    train_pooled,
    train_stage,
    two_stage,
    write_history_csv,
)

SPEC = PhantomSpec(grid_size=16, num_classes=4)
SPACE = LabelSpace.phantom(4)


@pytest.fixture(scope="module")
def cohort():
    return phantom_cohort(3, seed=7, corruption_rate=0.2, spec=SPEC)


def _pairs(cases, aux=False):
    return [(c.intensity, c.aux_labels if aux else c.labels) for c in cases]


def _net(view=View.CORONAL, seed=0):
    preset = NetworkPreset.for_view("miniature", view, SPACE, num_channels=4)
    return ViewNetwork(init_params(seed, preset), view)


def _scalar_params(value=1.0):
    return {"w.weight": Tensor(np.array([value]), requires_grad=True)}


def test_plain_sgd_reduction():
    params = _scalar_params(2.0)
    state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0)
    sgd_momentum_step(params, {"w.weight": np.array([3.0])}, state)
    np.testing.assert_allclose(params["w.weight"].data, [2.0 - 0.3])
    assert state.steps == 1


def test_velocity_approaches_geometric_limit():
    params = _scalar_params()
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    for _ in range(400):
        sgd_momentum_step(params, {"w.weight": np.array([1.0])}, state)
    assert abs(state.velocity["w.weight"][0]) == pytest.approx(20 * 0.01 * 1.0, rel=1e-6)


def test_quadratic_bowl_converges():
    params = _scalar_params(5.0)
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    for _ in range(500):
        sgd_momentum_step(params, {"w.weight": params["w.weight"].data.copy()}, state)
    assert abs(params["w.weight"].data[0]) < 1e-3


def test_weight_decay_skips_bias_and_batchnorm():
    params = {
        "conv.weight": Tensor(np.array([1.0]), requires_grad=True),
        "conv.bias": Tensor(np.array([1.0]), requires_grad=True),
        "bn.gamma": Tensor(np.array([1.0]), requires_grad=True),
    }
    state = OptimizerState(lr=1.0, momentum=0.0, weight_decay=0.5)
    zero = np.array([0.0])
    sgd_momentum_step(params, {"conv.weight": zero, "conv.bias": zero, "bn.gamma": zero}, state)
    assert params["conv.weight"].data[0] == pytest.approx(0.5)
    assert params["conv.bias"].data[0] == 1.0
    assert params["bn.gamma"].data[0] == 1.0


def test_nan_gradient_aborts():
    with pytest.raises(NumericalError, match="w.weight"):
        sgd_momentum_step(_scalar_params(), {"w.weight": np.array([np.nan])}, OptimizerState())


def test_step_reads_accumulated_gradients():
    params = _scalar_params(2.0)
    params["w.weight"].grad = np.array([3.0])
    sgd_momentum_step(params, None, OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(params["w.weight"].data, [2.0 - 0.3])


def test_schedule_closed_form():
    pre, fine = Schedule.pretrain(), Schedule.finetune()
    assert pre.lr_at(21) == pytest.approx(0.001)
    assert fine.lr_at(6) == pytest.approx(0.001)
    for epoch in range(40):
        assert pre.lr_at(epoch) == pytest.approx(0.1 * 10 ** -(epoch // 10))
        assert fine.lr_at(epoch) == pytest.approx(0.01 * 10 ** -(epoch // 5))


def test_overfit_schedule_never_stops_on_plateau():
    schedule = Schedule.overfit()
    assert schedule.patience == schedule.max_epochs == 30
    assert [schedule.lr_at(e) for e in (0, 19, 20, 29)] == pytest.approx([0.01, 0.01, 0.001, 0.001])
    assert Schedule.overfit(max_epochs=5).patience == 5


def test_history_is_append_only():
    run = TrainRun(seed=0, stage="pretrain")
    run.append(EpochRecord(epoch=0, train_loss=1.0, val_loss=1.0, lr=0.1))
    with pytest.raises(ValueError):
        run.append(EpochRecord(epoch=0, train_loss=1.0, val_loss=1.0, lr=0.1))


def test_slice_dataset_pads_and_merges_sagittal(cohort):
    coronal = SliceDataset.from_volumes(_pairs(cohort[:1]), View.CORONAL, SPACE)
    assert coronal.images.shape == (16, 1, 16, 16)
    assert coronal.num_classes == 4
    sagittal = SliceDataset.from_volumes(_pairs(cohort[:1]), View.SAGITTAL, SPACE)
    assert sagittal.num_classes == 3
    assert sagittal.labels.max() <= 2
    assert sagittal.frequencies.num_classes == 3


def test_batches_cover_every_slice_without_singletons(cohort):
    data = SliceDataset.from_volumes(_pairs(cohort[:1]), View.CORONAL, SPACE)
    batches = list(data.batches(5, np.random.default_rng(0)))
    assert sorted(np.concatenate(batches).tolist()) == list(range(16))
    assert min(b.size for b in batches) >= 2
    assert [b.size for b in data.batches(4)] == [4, 4, 4, 4]


def test_validation_reuses_training_frequencies(cohort):
    data = TrainingData.from_volumes(_pairs(cohort[:2]), _pairs(cohort[2:]), View.AXIAL, SPACE)
    assert data.val.frequencies == data.train.frequencies


def test_train_stage_records_history_and_checkpoint(cohort, tmp_path):
    data = TrainingData.from_volumes(_pairs(cohort[:2]), _pairs(cohort[2:]), View.CORONAL, SPACE)
    net = _net()
    run = train_stage(net, data, Schedule.pretrain(max_epochs=3), seed=1, batch_size=4, out_dir=tmp_path)
    assert [r.epoch for r in run.history] == [0, 1, 2]
    assert all(r.lr == pytest.approx(0.1) for r in run.history)
    assert run.best_val_loss == min(r.val_loss for r in run.history)
    checkpoint = load_checkpoint(tmp_path / "pretrain_coronal.ckpt")
    assert checkpoint.meta["best_epoch"] == str(run.best_epoch)
    assert checkpoint.label_space == SPACE
    for name, tensor in net.params:
        np.testing.assert_array_equal(checkpoint.network.params[name].data, tensor.data)

    write_history_csv(run, tmp_path / "history.csv")
    frame = pd.read_csv(tmp_path / "history.csv")
    assert list(frame.columns) == ["epoch", "train_loss", "val_loss", "lr"]
    assert len(frame) == 3


def test_training_is_reproducible(cohort, tmp_path):
    data = TrainingData.from_volumes(_pairs(cohort[:2]), _pairs(cohort[2:]), View.CORONAL, SPACE)
    runs = [
        train_stage(_net(), data, Schedule.pretrain(max_epochs=2), seed=3, out_dir=tmp_path / name)
        for name in ("first", "second")
    ]
    assert [r.train_loss for r in runs[0].history] == [r.train_loss for r in runs[1].history]
    assert [r.val_loss for r in runs[0].history] == [r.val_loss for r in runs[1].history]
    first, second = (tmp_path / name / "pretrain_coronal.ckpt" for name in ("first", "second"))
    assert first.read_bytes() == second.read_bytes()


def test_plateau_stops_early(cohort):
    data = TrainingData.from_volumes(_pairs(cohort[:2]), _pairs(cohort[2:]), View.CORONAL, SPACE)
    schedule = Schedule.pretrain(initial_lr=1e-12, patience=2, max_epochs=30)
    run = train_stage(_net(), data, schedule, seed=0)
    assert run.stopped_early
    assert len(run.history) < 30


def test_empty_split_and_class_mismatch(cohort):
    data = TrainingData.from_volumes(_pairs(cohort[:1]), _pairs(cohort[1:2]), View.CORONAL, SPACE)
    empty = SliceDataset(
        images=data.val.images[:0],
        labels=data.val.labels[:0],
        weights=data.val.weights[:0],
        frequencies=data.val.frequencies,
        view=View.CORONAL,
        label_space=SPACE,
    )
    with pytest.raises(DataError):
        train_stage(_net(), TrainingData(data.train, empty), Schedule.pretrain(max_epochs=1))
    with pytest.raises(DataError):
        train_stage(_net(View.SAGITTAL), data, Schedule.pretrain(max_epochs=1))


def test_two_stage_persists_both_checkpoints(cohort, tmp_path):
    aux = TrainingData.from_volumes(_pairs(cohort[:2], aux=True), _pairs(cohort[2:], aux=True), View.CORONAL, SPACE)
    manual = TrainingData.from_volumes(_pairs(cohort[:1]), _pairs(cohort[2:]), View.CORONAL, SPACE)
    result = two_stage(
        _net(), aux, manual, tmp_path, Schedule.pretrain(max_epochs=2), Schedule.finetune(max_epochs=2), seed=0
    )
    assert result.pretrained.name == "pretrain_coronal.ckpt"
    assert result.finetuned.name == "finetune_coronal.ckpt"
    assert result.finetune_run.history[0].lr == pytest.approx(0.01)
    pretrained = load_checkpoint(result.pretrained)
    finetuned = load_checkpoint(result.finetuned)
    assert pretrained.meta["stage"] == "pretrain"
    assert finetuned.meta["stage"] == "finetune"


def test_two_stage_rejects_label_space_mismatch(cohort, tmp_path):
    aux = TrainingData.from_volumes(_pairs(cohort[:1]), _pairs(cohort[1:2]), View.CORONAL, SPACE)
    other = LabelSpace(name="other", class_names=SPACE.class_names, pairs=[])
    manual = TrainingData.from_volumes(_pairs(cohort[:1]), _pairs(cohort[1:2]), View.CORONAL, other)
    with pytest.raises(DataError, match="label space"):
        two_stage(_net(), aux, manual, tmp_path)


def test_pooled_and_manual_only_modes(cohort):
    aux = TrainingData.from_volumes(_pairs(cohort[:1], aux=True), _pairs(cohort[2:], aux=True), View.CORONAL, SPACE)
    manual = TrainingData.from_volumes(_pairs(cohort[1:2]), _pairs(cohort[2:]), View.CORONAL, SPACE)
    pooled = train_pooled(_net(), aux, manual, Schedule.pretrain(stage="pooled", max_epochs=1))
    only = train_only_manual(_net(), manual, Schedule.pretrain(stage="manual", max_epochs=1))
    assert pooled.stage == "pooled" and only.stage == "manual"
    assert len(pooled.history) == len(only.history) == 1
