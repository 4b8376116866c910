import numpy as np
import pytest

from xmfnet.data import generate_objects, toy_view_config
from xmfnet.errors import ConfigError
from xmfnet.training import RunConfig, batches, make_optimizer, per_view_breakdown, train_supervised
from xmfnet.model import XMFNet


@pytest.fixture(scope="module")
def samples():
    objs = generate_objects(2, 2, 512, seed=2, view_cfg=toy_view_config())
    return [s for o in objs for s in o.samples()]


def test_presets():
    toy = RunConfig.preset("toy")
    assert toy.model.n_points == 512 and toy.lr == 1e-3
    paper = RunConfig.preset("paper")
    assert paper.model.n_points == 2048 and paper.views == 24 and paper.view.H == 224


def test_mode_sets_unimodal():
    assert RunConfig(mode="unimodal").model.unimodal
    assert not RunConfig(mode="weak").model.unimodal


@pytest.mark.parametrize("bad", [dict(mode="semi"), dict(scale="huge"), dict(steps=0), dict(lr=-1.0),
                                 dict(resample_min=0.5, resample_max=0.2)])
def test_run_config_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_run_config_roundtrip(tmp_path):
    run = RunConfig(mode="weak", seed=3, steps=7)
    run.save(tmp_path / "r.json")
    back = RunConfig.load(tmp_path / "r.json")
    assert back.to_dict() == run.to_dict()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"loss": {"gamma": 1}})


def test_batches_cover_each_epoch():
    it = batches(10, 4, np.random.default_rng(0))
    epoch = np.concatenate([next(it) for _ in range(2)])
    assert len(set(epoch)) == 8
    assert all(len(next(it)) == 4 for _ in range(5))
    with pytest.raises(ConfigError):
        next(batches(0, 4, np.random.default_rng(0)))


def test_lr_drops_by_epoch():
    run = RunConfig(batch_size=4, lr_milestones=(2, 3))
    opt, set_lr = make_optimizer(XMFNet(run.model), run, n_train=8)
    lrs = []
    for step in range(8):
        set_lr(step)
        lrs.append(opt.lr)
    assert lrs == pytest.approx([1e-3] * 4 + [1e-4] * 2 + [1e-5] * 2)


def test_supervised_bit_reproducible(samples, tmp_path):
    run = RunConfig(steps=3, batch_size=2, seed=5)
    a = train_supervised(samples, run, log_path=tmp_path / "a.csv")
    b = train_supervised(samples, run, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_supervised_eval_and_best_checkpoint(samples, tmp_path):
    run = RunConfig(steps=4, batch_size=2, eval_every=2)
    res = train_supervised(samples[:3], run, samples[3:], checkpoint=tmp_path / "best.xmf")
    evals = [float(r["eval_cd_e3"]) for r in res.log if r["eval_cd_e3"]]
    assert len(evals) == 2 and res.best_cd_e3 == pytest.approx(min(evals), rel=1e-8)
    assert (tmp_path / "best.xmf").is_file()


def test_per_view_breakdown_sorted():
    rows = [dict(view=v, cd_e3=c, fscore=0.0) for v, c in [(0, 1.0), (1, 5.0), (0, 3.0), (2, 0.5)]]
    out = per_view_breakdown(rows)
    assert [r["view"] for r in out] == [1, 0, 2]
    assert out[1]["cd_e3"] == 2.0 and out[1]["n"] == 2
