import numpy as np
import pytest

from deepgcn.data import SynthSpec, synth_dataset
from deepgcn.errors import ContractError, NumericError
from deepgcn.model import Model, ModelConfig
from deepgcn.train import evaluate, load_model, read_log, save_model, train


def tiny_cfg(**kw):
    vals = dict(backbone="residual", depth=2, width=8, k=4, d_max=4, num_classes=4,
                fusion_width=16, head_widths=(16, 8))
    vals.update(kw)
    return ModelConfig(**vals)


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(SynthSpec(num_blocks=2, points_per_block=64, seed=1))


def test_one_epoch_checkpoint_reproduces_eval(tiny, tmp_path):
    ckpt = tmp_path / "m.npz"
    res = train(tiny_cfg(), tiny, epochs=1, batch_size=2, checkpoint_path=ckpt)
    assert np.isfinite(res.final_loss)
    before, cm_before = evaluate(res.model, tiny)
    after, cm_after = evaluate(str(ckpt), tiny)
    assert np.array_equal(cm_before.counts, cm_after.counts)
    assert before.overall_accuracy == after.overall_accuracy
    reloaded = load_model(ckpt)
    assert reloaded.cfg == res.model.cfg


def test_zero_learning_rate_keeps_parameters(tiny):
    ref = Model(tiny_cfg(), seed=np.random.SeedSequence(0).spawn(2)[0])
    res = train(tiny_cfg(), tiny, epochs=1, lr=0.0)
    for name, p in res.model.named_parameters().items():
        assert np.array_equal(p.data, ref.named_parameters()[name].data), name


def test_loss_log_is_deterministic(tiny, tmp_path):
    a = train(tiny_cfg(), tiny, epochs=2, seed=3, log_path=tmp_path / "a.csv")
    b = train(tiny_cfg(), tiny, epochs=2, seed=3, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.losses == b.losses
    log = read_log(tmp_path / "a.csv")
    assert [r.epoch for r in log] == [1, 2] and [r.step for r in log] == [1, 2]
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,step,lr,loss,train_oa"
    c = train(tiny_cfg(), tiny, epochs=2, seed=4)
    assert c.losses != a.losses


def test_learning_rate_schedule_in_log(tiny):
    # two blocks at batch size 1: two Adam steps per epoch, halving every epoch
    res = train(tiny_cfg(), tiny, epochs=4, batch_size=1, lr=0.01, decay_steps=2, decay_factor=0.5)
    assert [r.step for r in res.log] == [2, 4, 6, 8]
    assert [r.lr for r in res.log] == [0.01, 0.005, 0.0025, 0.00125]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_reported(tiny):
    # absurd step sizes overflow the weights within a few updates
    with pytest.raises(NumericError, match="layer1="):
        train(tiny_cfg(), tiny, epochs=5, batch_size=1, lr=1e300)


def test_dataset_contracts(tiny):
    with pytest.raises(ContractError):
        train(tiny_cfg(num_classes=3), tiny, epochs=1)
    with pytest.raises(ContractError):
        train(tiny_cfg(aux_dim=2), tiny, epochs=1)
    with pytest.raises(ContractError):
        evaluate(Model(tiny_cfg(num_classes=5)), tiny)


def test_missing_config_sidecar(tiny, tmp_path):
    ckpt = tmp_path / "m.npz"
    save_model(Model(tiny_cfg()), ckpt)
    (tmp_path / "m.npz.config").unlink()
    with pytest.raises(ContractError):
        load_model(ckpt)


def test_threaded_evaluation_matches_serial(tiny):
    model = train(tiny_cfg(), tiny, epochs=1).model
    _, serial = evaluate(model, tiny)
    _, threaded = evaluate(model, tiny, workers=2)
    assert np.array_equal(serial.counts, threaded.counts)


@pytest.mark.slow
def test_two_cluster_learning_sanity():
    ds = synth_dataset(SynthSpec(num_blocks=8, points_per_block=256, num_classes=2, seed=0))
    cfg = tiny_cfg(width=16, num_classes=2, k=8, fusion_width=32, head_widths=(32, 16))
    res = train(cfg, ds, epochs=50, lr=0.01, decay_steps=40)
    assert max(r.train_oa for r in res.log) > 0.95
