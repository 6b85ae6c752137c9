import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

import graspvq.pipeline as pl
from graspvq.dataset import Sample, split, synth_generate
from graspvq.geometry import GraspMaps, GraspRectangle, maps_to_grasp, rectangles_to_maps
from graspvq.networks import NetworkConfig
from graspvq.pipeline import (CSV_HEADER, ExperimentConfig, MetricsRecord, TrainingError,
                              evaluate, load_grasp_model, predict, records_to_csv, sweep,
                              train_baseline, train_grasp, train_vqvae)

TINY_NET = {"input_channels": 1, "input_size": 32, "embedding_dim": 8, "codebook_size": 16,
            "base_channels": 8, "grasp_channels": [8, 8], "grasp_kernels": [5, 3],
            "baseline_channels": [8, 8, 8]}


def tiny_config(**kw):
    base = dict(dataset={"kind": "synthetic", "n": 40, "image_size": 32, "seed": 0},
                network=dict(TINY_NET), vqvae_epochs=2, grasp_epochs=2, batch_size=8,
                ratios=[0.1, 0.5, 0.9], seeds=[0], save_checkpoints=False)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return synth_generate(40, 32, seed=0)


@pytest.fixture(scope="module")
def tiny_split(samples):
    return split(samples, 0.1, 0.25, seed=0)


class Watched:
    """Proxy that counts attribute reads on a sample."""

    def __init__(self, sample, counter, fields=None):
        self._sample, self._counter, self._fields = sample, counter, fields

    def __getattr__(self, name):
        if self._fields is None or name in self._fields:
            self._counter[name] = self._counter.get(name, 0) + 1
        return getattr(self._sample, name)


class StubModel(torch.nn.Module):
    """Returns maps built from a per-image lookup keyed by the first pixel value."""

    def __init__(self, lookup, size):
        super().__init__()
        self.lookup, self.size = lookup, size
        self.config = NetworkConfig(**TINY_NET)

    def forward(self, x):
        out = []
        for img in x:
            rects = self.lookup[round(float(img[0, 0, 0]) * 255)]
            out.append(torch.from_numpy(rectangles_to_maps(rects, self.size, self.size, 150).stack()))
        return torch.stack(out).float()


def keyed_samples(n=6, size=32):
    out = []
    for i in range(n):
        img = np.full((1, size, size), i / 255, np.float32)
        out.append(Sample(img, [GraspRectangle(10 + i, 12, 0.2 * i, 12, 6)], f"k{i}"))
    return out


class TestEvaluate:
    def test_perfect_stub(self):
        test = keyed_samples()
        model = StubModel({i: s.positive_rects for i, s in enumerate(test)}, 32)
        rec = evaluate(model, test, 150)
        assert rec.test_accuracy == 1.0 and rec.successes == 6 and rec.n_test == 6

    def test_disjoint_stub(self):
        test = keyed_samples()
        far = [GraspRectangle(28, 3, 0, 6, 3)]
        model = StubModel({i: far for i in range(6)}, 32)
        assert evaluate(model, test, 150).test_accuracy == 0.0

    def test_partial_and_order_invariant(self):
        test = keyed_samples()
        far = [GraspRectangle(28, 3, 0, 6, 3)]
        lookup = {i: (s.positive_rects if i % 3 == 0 else far) for i, s in enumerate(test)}
        model = StubModel(lookup, 32)
        a = evaluate(model, test, 150).test_accuracy
        b = evaluate(model, list(reversed(test)), 150).test_accuracy
        assert a == b == 2 / 6

    def test_unlabelled_test_sample(self):
        test = keyed_samples()
        test[2] = Sample(test[2].image, [], "bad")
        with pytest.raises(ValueError):
            evaluate(StubModel({}, 32), test, 150)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(StubModel({}, 32), [], 150)


class TestIsolation:
    def test_vqvae_never_reads_labels(self, tiny_split):
        counter = {}
        watched = [Watched(s, counter, {"positive_rects", "meta"})
                   for s in tiny_split.labelled + tiny_split.unlabelled]
        sp = pl.DatasetSplit(watched[:len(tiny_split.labelled)], watched[len(tiny_split.labelled):],
                             tiny_split.test, 0, 0.25, 0.1)
        train_vqvae(sp, tiny_config(vqvae_epochs=1), 0)
        assert counter == {}

    def test_baseline_never_touches_unlabelled(self, tiny_split):
        counter = {}
        sp = pl.DatasetSplit(tiny_split.labelled, [Watched(s, counter) for s in tiny_split.unlabelled],
                             tiny_split.test, 0, 0.25, 0.1)
        train_baseline(sp, tiny_config(grasp_epochs=1), 0)
        assert counter == {}

    def test_grasp_phase_freezes_encoder_and_codebook(self, tiny_split):
        cfg = tiny_config()
        vq, _ = train_vqvae(tiny_split, cfg, 0)
        before = {k: v.clone() for k, v in vq.state_dict().items()}
        model, _ = train_grasp(tiny_split, vq, cfg, 0)
        for k, v in model.encoder.state_dict().items():
            assert torch.equal(v, before[f"encoder.{k}"]), k
        assert torch.equal(model.codebook.embeddings, before["codebook.embeddings"])
        # the source VQ-VAE is untouched too
        assert all(torch.equal(v, before[k]) for k, v in vq.state_dict().items())

    def test_fingerprint_mismatch(self, tiny_split):
        cfg = tiny_config()
        vq, _ = train_vqvae(tiny_split, cfg, 0)
        other = tiny_config(network={**TINY_NET, "codebook_size": 32})
        with pytest.raises(Exception, match="match"):
            train_grasp(tiny_split, vq, other, 0)

    def test_empty_labelled(self, tiny_split):
        sp = pl.DatasetSplit([], tiny_split.unlabelled, tiny_split.test, 0, 0.1, 0.1)
        with pytest.raises(ValueError):
            train_baseline(sp, tiny_config(), 0)


class TestTraining:
    def test_vqvae_deterministic_and_checkpointed(self, tiny_split, tmp_path):
        cfg = tiny_config()
        _, h1 = train_vqvae(tiny_split, cfg, 0, tmp_path / "a")
        _, h2 = train_vqvae(tiny_split, cfg, 0)
        assert h1["total"] == h2["total"] and h1["perplexity"] == h2["perplexity"]
        assert h1["kl_constant"] == pytest.approx(math.log(16))
        model, _ = train_grasp(tiny_split, tmp_path / "a", cfg, 0)
        assert model is not None

    def test_single_image_single_epoch(self, samples, tmp_path):
        sp = pl.DatasetSplit(samples[:1], [], samples[1:2], 0, 1.0, 0.5)
        train_vqvae(sp, tiny_config(vqvae_epochs=1), 0, tmp_path)
        pl.load_vqvae(tmp_path, NetworkConfig(**TINY_NET))

    def test_nan_loss_aborts_with_diagnostic(self, tiny_split):
        bad = [Sample(np.full_like(s.image, np.nan), s.positive_rects, s.source_id)
               for s in tiny_split.labelled]
        sp = pl.DatasetSplit(bad, [], tiny_split.test, 0, 1.0, 0.1)
        with pytest.raises(TrainingError, match="epoch 0, batch 0"):
            train_baseline(sp, tiny_config(), 0)

    def test_grasp_loss_decreases(self, samples):
        sp = split(samples, 0.1, 0.6, seed=1)
        _, curve = train_baseline(sp, tiny_config(grasp_epochs=15, augment=False), 0)
        assert curve[-1] < curve[0]

    def test_grasp_checkpoint_round_trip(self, tiny_split, tmp_path):
        cfg = tiny_config()
        vq, _ = train_vqvae(tiny_split, cfg, 0)
        model, _ = train_grasp(tiny_split, vq, cfg, 0, tmp_path / "p")
        base, _ = train_baseline(tiny_split, cfg, 0, tmp_path / "b")
        x = torch.from_numpy(np.stack([s.image for s in tiny_split.test]))
        with torch.no_grad():
            assert torch.equal(load_grasp_model(tmp_path / "p")(x), model(x))
            assert torch.equal(load_grasp_model(tmp_path / "b")(x), base(x))


class TestPredict:
    def test_outputs(self, tiny_split, samples, tmp_path):
        cfg = tiny_config()
        train_baseline(tiny_split, cfg, 0, tmp_path / "ckpt")
        model = load_grasp_model(tmp_path / "ckpt")
        img_path = tmp_path / "in.png"
        Image.fromarray(np.round(samples[0].image[0] * 255).astype(np.uint8)).save(img_path)
        grasp = predict(model, img_path, tmp_path / "out")
        for name in ("quality.png", "angle.png", "width.png", "annotated.png", "grasp.json"):
            assert (tmp_path / "out" / name).exists()
        payload = json.loads((tmp_path / "out" / "grasp.json").read_text())
        assert {"center_row", "center_col", "angle", "width", "quality"} <= set(payload)
        assert payload["colour_scale"]["quality"]["normalization"] == "per-map min-max"
        raw = np.load(tmp_path / "out" / "maps.npz")
        again = maps_to_grasp(GraspMaps(raw["quality"], raw["angle_sin"], raw["angle_cos"],
                                        raw["width"]), float(raw["width_scale"]))
        assert again.as_dict() == grasp.as_dict()
        assert payload["center_row"] == again.center_row

    def test_constant_quality_decodes_to_origin(self, tmp_path):
        class Constant(torch.nn.Module):
            config = NetworkConfig(**TINY_NET)

            def forward(self, x):
                out = torch.zeros(len(x), 4, 32, 32)
                out[:, 0] = 0.5
                out[:, 2] = 1.0
                out[:, 3] = 0.1
                return out

        Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "z.png")
        g = predict(Constant(), tmp_path / "z.png", tmp_path / "out")
        assert (g.center_row, g.center_col) == (0, 0)

    def test_unreadable_image(self, tmp_path):
        (tmp_path / "bad.png").write_text("not an image")
        with pytest.raises(Exception):
            predict(StubModel({}, 32), tmp_path / "bad.png", tmp_path / "out")


class TestSweep:
    def test_rows_and_schema(self, samples, tmp_path):
        records = sweep(tiny_config(), tmp_path, samples)
        assert len(records) == 6
        text = (tmp_path / "metrics.csv").read_text().splitlines()
        assert text[0] == ",".join(CSV_HEADER)
        assert len(text) == 7
        for line in text[1:]:
            ratio, method, seed, acc, status = line.split(",")
            assert status == "ok" and len(acc.split(".")[1]) == 6
        assert (tmp_path / "accuracy_vs_ratio.png").exists()

    def test_failed_cell_recorded(self, samples, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("injected")

        monkeypatch.setattr(pl, "train_baseline", boom)
        records = sweep(tiny_config(ratios=[0.5]), tmp_path, samples)
        by_method = {r.method: r for r in records}
        assert by_method["baseline"].status == "failed"
        assert by_method["proposed"].status == "ok"
        assert "0.5,baseline,0,,failed" in (tmp_path / "metrics.csv").read_text()

    def test_bad_ratio(self, samples):
        with pytest.raises(ValueError):
            sweep(tiny_config(ratios=[1.5]), None, samples)

    def test_csv_sorted(self):
        recs = [MetricsRecord(0.5, "proposed", 1, 0.5), MetricsRecord(0.1, "proposed", 0, 0.25),
                MetricsRecord(0.1, "baseline", 0, 1.0)]
        lines = records_to_csv(recs).splitlines()
        assert lines[1:] == ["0.1,baseline,0,1.000000,ok", "0.1,proposed,0,0.250000,ok",
                             "0.5,proposed,1,0.500000,ok"]


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_round_trip_json_and_yaml(self, tmp_path):
        cfg = tiny_config()
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_file(tmp_path / "c.json").to_dict() == cfg.to_dict()
        import yaml
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg.to_dict()))
        assert ExperimentConfig.from_file(tmp_path / "c.yaml").to_dict() == cfg.to_dict()

    @pytest.mark.parametrize("kw", [{"seeds": []}, {"optimizer": "rmsprop"}, {"methods": ["x"]}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny_config(**kw)
