import csv
import json

import numpy as np
import pytest

from xmfnet import cli
from xmfnet.autodiff import Tensor
from xmfnet.errors import DivergenceError
from xmfnet.geometry import read_pcf
from xmfnet.render import read_pgm
from xmfnet.training import RunConfig, check_finite, evaluate, mean_metrics, per_view_breakdown

TINY = ["--steps", "2", "--batch-size", "2", "--seed", "0"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(root), "--shapes", "8", "--views", "2", "--seed", "0"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--mode", "supervised"] + TINY) == 0
    return out


# -- gen-data -----------------------------------------------------------------

def test_gen_data_manifest(dataset, capsys):
    rows = read_csv(dataset / "manifest.csv")
    assert len(rows) == 8
    assert all(r["n_views"] == "2" for r in rows)
    assert (dataset / "config.json").is_file()


def test_gen_data_rerun_identical(dataset, tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--shapes", "8", "--views", "2", "--seed", "0"]) == 0
    # config.json differs only in the recorded output path
    for f in sorted(p for p in dataset.rglob("*") if p.is_file() and p.name != "config.json"):
        assert f.read_bytes() == (tmp_path / f.relative_to(dataset)).read_bytes(), f
    a, b = (json.loads((d / "config.json").read_text()) for d in (dataset, tmp_path))
    assert {**a, "out": None} == {**b, "out": None}


# -- train --------------------------------------------------------------------

def test_train_supervised_outputs(trained, capsys):
    log = read_csv(trained / "train_log.csv")
    assert len(log) == 2 and len({r["loss_type"] for r in log}) == 1
    assert list(log[0]) == ["step", "loss_type", "loss", "eval_cd_e3", "eval_fscore"]
    assert (trained / "model.xmf").is_file()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["steps"] == 2 and cfg["mode"] == "supervised"


@pytest.mark.parametrize("mode", ["weak", "unimodal"])
def test_train_other_modes(dataset, tmp_path, mode, capsys):
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path), "--mode", mode] + TINY) == 0
    gt_train = [r for r in read_csv(tmp_path / "access_log.csv")
                if r["phase"] == "train" and r["path"].endswith("complete.pcf")]
    reported = f"ground-truth reads during training: {len(gt_train)}"
    assert reported in capsys.readouterr().out
    # unimodal is a supervised ablation; only weak mode must stay blind to complete clouds
    assert (len(gt_train) == 0) == (mode == "weak")
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["model"]["unimodal"] == (mode == "unimodal")


def test_train_loss_flags_resolved(dataset, tmp_path):
    args = ["train", "--data", str(dataset), "--out", str(tmp_path), "--mode", "weak", "--beta", "0.6",
            "--alpha", "30", "--lambda", "0.2", "--epsilon-mask", "0.3"] + TINY
    assert cli.main(args) == 0
    cfg = RunConfig.load(tmp_path / "config.json")
    assert (cfg.loss.beta, cfg.loss.alpha, cfg.loss.lam, cfg.render.epsilon) == (0.6, 30.0, 0.2, 0.3)


# -- eval ---------------------------------------------------------------------

def test_eval_csvs(dataset, trained, tmp_path):
    assert cli.main(["eval", "--data", str(dataset), "--checkpoint", str(trained / "model.xmf"),
                     "--out", str(tmp_path), "--split", "all"]) == 0
    metrics = read_csv(tmp_path / "metrics.csv")
    assert metrics[-1]["sample_id"] == "mean" and len(metrics) == 17
    per_view = read_csv(tmp_path / "per_view.csv")
    assert len(per_view) == 2
    cds = [float(r["cd_e3"]) for r in per_view]
    assert cds == sorted(cds, reverse=True)
    mean = float(metrics[-1]["cd_e3"])
    assert min(cds) - 1e-9 <= mean <= max(cds) + 1e-9


class Oracle:
    """Returns the ground truth itself."""

    def __init__(self, samples):
        self.gt = {id(s.partial): s.complete for s in samples}

    def complete(self, X, image=None):
        return Tensor(self.gt[id(X)])


def test_evaluate_ground_truth_against_itself(dataset):
    from xmfnet.data import load_dataset
    samples = [s.materialize(with_complete=True) for s in load_dataset(dataset, "all", 512)]
    rows = evaluate(Oracle(samples), samples)
    assert mean_metrics(rows) == (0.0, 1.0)
    assert all(r["n"] == 8 for r in per_view_breakdown(rows))


# -- complete / render --------------------------------------------------------

def test_complete_and_render(dataset, trained, tmp_path):
    sample = dataset / "shape_0000"
    out = tmp_path / "pred.pcf"
    args = ["complete", "--checkpoint", str(trained / "model.xmf"), "--partial", str(sample / "partial_0.pcf"),
            "--image", str(sample / "view_0.pgm"), "--output", str(out), "--camera", str(sample / "cam_0.json"),
            "--render", str(tmp_path / "pred.pgm")]
    assert cli.main(args) == 0
    pred = read_pcf(out)
    assert pred.shape == (512, 3)
    assert (tmp_path / "pred.pgm").read_bytes()[:2] == b"P5"
    assert read_pgm(tmp_path / "pred.pgm").shape == (64, 64)
    assert (tmp_path / "pred.pcf.config.json").is_file()
    first = out.read_bytes()
    assert cli.main(args) == 0
    assert out.read_bytes() == first


def test_render_command(dataset, tmp_path):
    sample = dataset / "shape_0000"
    out = tmp_path / "r.pgm"
    assert cli.main(["render", "--input", str(sample / "complete.pcf"), "--camera", str(sample / "cam_1.json"),
                     "--output", str(out)]) == 0
    img = read_pgm(out)
    assert img.shape == (64, 64) and img.max() > 0.5
    assert (tmp_path / "r.pgm.config.json").is_file()


# -- errors -------------------------------------------------------------------

def test_bad_json_line_precise(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "steps": 3,\n  "lr": ,\n}')
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "c.json:3:" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"stepz": 3}')
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_invalid_value_is_config_error(dataset, tmp_path):
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path), "--beta", "2"]) == cli.EXIT_CONFIG


def test_missing_data_exit_3(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == cli.EXIT_DATA
    assert "none" in capsys.readouterr().err


def test_wrong_cardinality_exit_3(trained, dataset, tmp_path):
    from xmfnet.geometry import write_pcf
    bad = tmp_path / "bad.pcf"
    write_pcf(bad, np.zeros((10, 3)))
    args = ["complete", "--checkpoint", str(trained / "model.xmf"), "--partial", str(bad),
            "--image", str(dataset / "shape_0000" / "view_0.pgm"), "--output", str(tmp_path / "o.pcf")]
    assert cli.main(args) == cli.EXIT_DATA


def test_divergence_exit_4(dataset, tmp_path, monkeypatch):
    def diverge(*a, **k):
        check_finite(Tensor(np.array(np.nan)), 7)
    monkeypatch.setattr(cli, "train_supervised", diverge)
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path)] + TINY) == cli.EXIT_DIVERGENCE


def test_check_finite():
    assert check_finite(Tensor(np.array(1.5)), 0) == 1.5
    with pytest.raises(DivergenceError, match="step 3"):
        check_finite(Tensor(np.array(np.inf)), 3)
