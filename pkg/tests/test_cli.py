import json

import pytest

from graspvq.cli import main
from graspvq.pipeline import CSV_HEADER
from test_pipeline import TINY_NET


@pytest.fixture
def config_file(tmp_path):
    cfg = {"dataset": {"kind": "synthetic", "n": 40, "image_size": 32, "seed": 0},
           "network": TINY_NET, "vqvae_epochs": 1, "grasp_epochs": 1, "batch_size": 8,
           "labelled_ratio": 0.25, "ratios": [0.5]}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run_json(out):
    return json.loads((out / "run.json").read_text())


def test_synth_data(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["synth-data", "--n", "5", "--image-size", "32", "--seed", "3", "--out", str(out)]) == 0
    assert len((out / "index.jsonl").read_text().splitlines()) == 5
    assert run_json(out)["generator_seed"] == 3


def test_full_workflow(tmp_path, config_file, capsys):
    c = ["--config", str(config_file), "--seed", "1"]
    vq = tmp_path / "vq"
    assert main(["train-vqvae", *c, "--out", str(vq)]) == 0
    assert (vq / "vqvae" / "manifest.json").exists() and (vq / "vqvae_loss.png").exists()
    assert run_json(vq)["config"]["seeds"] == [1]
    assert capsys.readouterr().out.startswith("epoch,recon,codebook,commitment,total,perplexity")

    grasp = tmp_path / "grasp"
    assert main(["train-grasp", *c, "--vqvae", str(vq / "vqvae"), "--out", str(grasp)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and lines[1].startswith("0.25,proposed,1,")

    base = tmp_path / "base"
    assert main(["train-baseline", *c, "--out", str(base)]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("0.25,baseline,1,")

    ev = tmp_path / "eval"
    assert main(["evaluate", *c, "--checkpoint", str(grasp / "proposed"), "--out", str(ev)]) == 0
    assert (ev / "metrics.csv").read_text() == (grasp / "metrics.csv").read_text()
    capsys.readouterr()

    main(["synth-data", "--n", "1", "--image-size", "32", "--out", str(tmp_path / "data")])
    img = next((tmp_path / "data").glob("*.png"))
    capsys.readouterr()
    pr = tmp_path / "pred"
    assert main(["predict", *c, "--checkpoint", str(base / "baseline"), "--image", str(img),
                 "--out", str(pr)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == {k: v for k, v in json.loads((pr / "grasp.json").read_text()).items()
                       if k != "colour_scale"}
    assert (pr / "run.json").exists()


def test_sweep(tmp_path, config_file, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config_file), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed == (out / "metrics.csv").read_text()
    assert len(printed.splitlines()) == 3
    assert (out / "accuracy_vs_ratio.png").exists() and (out / "run.json").exists()


def test_errors_are_reported(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_train_grasp_requires_vqvae(tmp_path, config_file):
    with pytest.raises(SystemExit):
        main(["train-grasp", "--config", str(config_file), "--out", str(tmp_path)])
