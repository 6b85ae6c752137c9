"""Two-phase semi-supervised training, the supervised baseline, evaluation and sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import DatasetSplit, augment_corners, load_dataset, load_image, split
from .geometry import (DEFAULT_WIDTH_SCALE, GraspMaps, GraspRectangle, is_success,
                       maps_to_grasp, parse_rectangle, rectangles_to_maps)
from .networks import (VQVAE, BaselineGraspNet, GraspHead, NetworkConfig,
                       ProposedGraspNet, build_baseline, build_codebook,
                       build_encoder, build_grasp_head, vqvae_forward)
from .quantizer import kl_constant, perplexity, vq_loss

log = logging.getLogger(__name__)

CSV_HEADER = ["labelled_ratio", "method", "seed", "test_accuracy", "status"]
METHODS = ("proposed", "baseline")


class TrainingError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "n": 300,
                                                   "image_size": 64, "seed": 0})
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(input_channels=1,
                                                                         input_size=64))
    labelled_ratio: float = 0.1
    test_fraction: float = 0.1
    seeds: list = field(default_factory=lambda: [0])
    ratios: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    methods: list = field(default_factory=lambda: list(METHODS))
    vqvae_epochs: int = 100
    grasp_epochs: int = 200
    batch_size: int = 4
    vqvae_batch_size: int = 16
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    vqvae_learning_rate: float = 3e-4
    momentum: float = 0.9
    width_scale: float = 32.0  # half the default 64 px synthetic image
    augment: bool = True
    decode_sigma: float = 0.0
    angle_threshold: float | None = None
    save_checkpoints: bool = True
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        self.network.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            return cls.from_dict(yaml.safe_load(text) or {})
        return cls.from_dict(json.loads(text))


@dataclass
class MetricsRecord:
    labelled_ratio: float
    method: str
    seed: int
    test_accuracy: float
    successes: int = 0
    n_test: int = 0
    vq_loss_curve: list = field(default_factory=list)
    grasp_loss_curve: list = field(default_factory=list)
    status: str = "ok"

    def csv_row(self) -> list[str]:
        acc = "" if self.status != "ok" else f"{self.test_accuracy:.6f}"
        return [f"{self.labelled_ratio:g}", self.method, str(self.seed), acc, self.status]


# --- helpers ---------------------------------------------------------------

def _optimizer(params, cfg: ExperimentConfig, lr: float | None = None):
    params = list(params)
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=lr)


def _epoch_plan(n: int, batch_size: int, seed: int, epoch: int, augment: bool):
    """Shuffled batches plus per-sample (quarter turns, flip) for one epoch."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    turns = rng.integers(0, 4, size=n) if augment else np.zeros(n, dtype=int)
    flips = rng.integers(0, 2, size=n).astype(bool) if augment else np.zeros(n, dtype=bool)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)], turns, flips


def _transform(img: torch.Tensor, k: int, flip: bool) -> torch.Tensor:
    out = torch.rot90(img, int(k), dims=(1, 2))
    return torch.flip(out, dims=(2,)) if flip else out


def _stack(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))


def grasp_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-channel mean squared error, summed over the four maps."""
    return ((pred - target) ** 2).mean(dim=(0, 2, 3)).sum()


def _check_finite(loss, epoch, batch, **parts):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={torch.as_tensor(v).item():.6g}" for k, v in parts.items())
        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


class LabelCache:
    """Target maps for every (sample, quarter turn, flip) seen so far."""

    def __init__(self, samples, width_scale: float):
        self.samples = samples
        self.width_scale = width_scale
        self._cache: dict = {}

    def get(self, i: int, k: int, flip: bool) -> np.ndarray:
        key = (i, int(k), bool(flip))
        if key not in self._cache:
            s = self.samples[i]
            C, H, W = s.image.shape
            rects = [parse_rectangle(augment_corners(r.corners(), k, flip, H, W))
                     for r in s.positive_rects]
            Ho, Wo = (W, H) if k % 2 else (H, W)
            maps = rectangles_to_maps(rects, Ho, Wo, self.width_scale)
            self._cache[key] = maps.stack().astype(np.float32)
        return self._cache[key]


# --- phase 1: VQ-VAE -------------------------------------------------------

def train_vqvae(split_: DatasetSplit, config: ExperimentConfig, seed: int = 0,
                out_dir=None) -> tuple[VQVAE, dict]:
    """Fit encoder, codebook and decoder on every training image; labels are never read."""
    pool = list(split_.labelled) + list(split_.unlabelled)
    if not pool:
        raise ValueError("training pool is empty")
    # order by id so the run depends on the pool's contents, not on how it was split
    pool.sort(key=lambda s: s.source_id)
    images = _stack([s.image for s in pool])
    net_cfg = config.network
    torch.manual_seed(seed)
    model = VQVAE(net_cfg, seed=seed)
    opt = _optimizer(model.parameters(), config, config.vqvae_learning_rate)
    K = net_cfg.codebook_size

    def evaluate_recon():
        with torch.no_grad():
            total = 0.0
            for i in range(0, len(images), 64):
                x = images[i:i + 64]
                recon, _, _ = model(x)
                total += float(((recon - x) ** 2).mean()) * len(x)
        return total / len(images)

    history = {"recon": [], "codebook": [], "commitment": [], "total": [], "perplexity": [],
               "kl_constant": kl_constant(K), "initial_recon": evaluate_recon()}
    for epoch in range(config.vqvae_epochs):
        batches, turns, flips = _epoch_plan(len(images), config.vqvae_batch_size, seed, epoch,
                                            config.augment)
        sums = np.zeros(4)
        codes = []
        for b, idx in enumerate(batches):
            x = torch.stack([_transform(images[i], turns[i], flips[i]) for i in idx])
            recon, _, q = vqvae_forward(model.encoder, model.codebook, model.decoder, x)
            recon_loss = ((recon - x) ** 2).mean()
            loss = vq_loss(recon_loss, q.codebook_loss, q.commitment_loss, net_cfg.beta)
            _check_finite(loss, epoch, b, recon=recon_loss, codebook=q.codebook_loss,
                          commitment=q.commitment_loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(idx)
            sums += n * np.array([recon_loss.item(), q.codebook_loss.item(),
                                  q.commitment_loss.item(), loss.item()])
            codes.append(q.indices.reshape(-1))
        sums /= len(images)
        for key, v in zip(("recon", "codebook", "commitment", "total"), sums):
            history[key].append(float(v))
        history["perplexity"].append(perplexity(torch.cat(codes), K))
        log.info("vqvae epoch %d recon %.5f perplexity %.2f", epoch, sums[0],
                 history["perplexity"][-1])
    history["final_recon"] = evaluate_recon()
    if out_dir is not None:
        ckpt.save_checkpoint(out_dir, {"encoder": model.encoder, "codebook": model.codebook,
                                       "decoder": model.decoder},
                             net_cfg, "vqvae", {"phase": "vqvae", "epoch": config.vqvae_epochs,
                                                "seed": seed, "history": history})
    return model, history


def load_vqvae(path, config: NetworkConfig) -> VQVAE:
    model = VQVAE(config)
    ckpt.load_checkpoint(path, {"encoder": model.encoder, "codebook": model.codebook,
                                "decoder": model.decoder}, config, kind="vqvae")
    return model


# --- phase 2: grasp head / baseline -----------------------------------------

def _fit_grasp(model, params, samples, config: ExperimentConfig, seed: int) -> list[float]:
    images = _stack([s.image for s in samples])
    labels = LabelCache(samples, config.width_scale)
    opt = _optimizer(params, config)
    curve = []
    for epoch in range(config.grasp_epochs):
        batches, turns, flips = _epoch_plan(len(samples), config.batch_size, seed, epoch,
                                            config.augment)
        total = 0.0
        for b, idx in enumerate(batches):
            x = torch.stack([_transform(images[i], turns[i], flips[i]) for i in idx])
            y = torch.from_numpy(np.stack([labels.get(i, turns[i], flips[i]) for i in idx]))
            loss = grasp_loss(model(x), y)
            _check_finite(loss, epoch, b, grasp=loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(samples))
        log.info("grasp epoch %d loss %.5f", epoch, curve[-1])
    return curve


def _resolve_vqvae(vqvae, config: ExperimentConfig) -> VQVAE:
    if isinstance(vqvae, VQVAE):
        if vqvae.config.fingerprint() != config.network.fingerprint():
            raise ckpt.CheckpointError("VQ-VAE architecture does not match the experiment config")
        return vqvae
    return load_vqvae(vqvae, config.network)


def train_grasp(split_: DatasetSplit, vqvae, config: ExperimentConfig, seed: int = 0,
                out_dir=None) -> tuple[ProposedGraspNet, list[float]]:
    """Freeze the VQ-VAE encoder and codebook, then fit the grasp head on labelled samples."""
    labelled = list(split_.labelled)
    if not labelled:
        raise ValueError("no labelled samples to train the grasp head on")
    vq = _resolve_vqvae(vqvae, config)
    torch.manual_seed(seed + 1)
    head = build_grasp_head(config.network, decoder=vq.decoder)
    encoder, codebook = build_encoder(config.network), build_codebook(config.network)
    encoder.load_state_dict(vq.encoder.state_dict())
    codebook.load_state_dict(vq.codebook.state_dict())
    model = ProposedGraspNet(config.network, encoder, codebook, head)
    curve = _fit_grasp(model, head.parameters(), labelled, config, seed + 1)
    if out_dir is not None:
        save_grasp_model(out_dir, model, {"phase": "grasp", "epoch": config.grasp_epochs,
                                          "seed": seed, "loss_curve": curve})
    return model, curve


def train_baseline(split_: DatasetSplit, config: ExperimentConfig, seed: int = 0,
                   out_dir=None) -> tuple[BaselineGraspNet, list[float]]:
    """Supervised-only network on the labelled samples; unlabelled samples are never touched."""
    labelled = list(split_.labelled)
    if not labelled:
        raise ValueError("no labelled samples to train the baseline on")
    torch.manual_seed(seed + 2)
    model = BaselineGraspNet(config.network, build_baseline(config.network))
    curve = _fit_grasp(model, model.parameters(), labelled, config, seed + 2)
    if out_dir is not None:
        save_grasp_model(out_dir, model, {"phase": "baseline", "epoch": config.grasp_epochs,
                                          "seed": seed, "loss_curve": curve})
    return model, curve


def save_grasp_model(path, model, metadata: dict):
    if isinstance(model, ProposedGraspNet):
        groups = {"encoder": model.encoder, "codebook": model.codebook, "head": model.head}
        kind = "proposed"
    else:
        groups, kind = {"net": model.net}, "baseline"
    return ckpt.save_checkpoint(path, groups, model.config, kind, metadata)


def load_grasp_model(path):
    """Rebuild a proposed or baseline grasp network from its checkpoint."""
    manifest = ckpt.read_manifest(path)
    config = NetworkConfig.from_dict(manifest["config"])
    if manifest["kind"] == "proposed":
        encoder, codebook = build_encoder(config), build_codebook(config)
        head = GraspHead(config)
        ckpt.load_checkpoint(path, {"encoder": encoder, "codebook": codebook, "head": head},
                             config, kind="proposed")
        return ProposedGraspNet(config, encoder, codebook, head)
    if manifest["kind"] == "baseline":
        net = build_baseline(config)
        ckpt.load_checkpoint(path, {"net": net}, config, kind="baseline")
        return BaselineGraspNet(config, net)
    raise ckpt.CheckpointError(f"{path} is a {manifest['kind']!r} checkpoint, not a grasp model")


# --- evaluation / prediction ------------------------------------------------

def predict_maps(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(np.asarray(model(torch.as_tensor(images[i:i + batch_size]))))
    return np.concatenate(out)


def evaluate(model, test, width_scale: float = DEFAULT_WIDTH_SCALE, *, method: str = "",
             labelled_ratio: float = float("nan"), seed: int = -1, decode_sigma: float = 0.0,
             angle_threshold: float | None = None) -> MetricsRecord:
    """Fraction of test images whose decoded grasp beats 25% Jaccard against some label."""
    test = list(test)
    if not test:
        raise ValueError("empty test set")
    for s in test:
        if not s.positive_rects:
            raise ValueError(f"test sample {s.source_id!r} has no grasp labels")
    maps = predict_maps(model, _stack([s.image for s in test]).numpy())
    successes = 0
    for s, m in zip(test, maps):
        pred = maps_to_grasp(GraspMaps.from_array(m.astype(np.float64)), width_scale, decode_sigma)
        successes += is_success(pred, s.positive_rects, max_angle_diff=angle_threshold)
    return MetricsRecord(labelled_ratio, method, seed, successes / len(test), successes, len(test))


def predict(model, image_path, output_dir, width_scale: float = DEFAULT_WIDTH_SCALE,
            decode_sigma: float = 0.0) -> GraspRectangle:
    """Decode a grasp for one image and render its maps next to the annotated input."""
    from .plotting import render_prediction

    cfg = model.config
    image = load_image(image_path, cfg.input_channels, cfg.input_size)
    maps = GraspMaps.from_array(predict_maps(model, image[None])[0].astype(np.float64))
    grasp = maps_to_grasp(maps, width_scale, decode_sigma)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    np.savez(output_dir / "maps.npz", quality=maps.quality, angle_sin=maps.angle_sin,
             angle_cos=maps.angle_cos, width=maps.width, width_scale=width_scale,
             decode_sigma=decode_sigma)
    colour = render_prediction(image, maps, grasp, output_dir, width_scale)
    payload = {**grasp.as_dict(), "colour_scale": colour}
    (output_dir / "grasp.json").write_text(json.dumps(payload, indent=2))
    return grasp


# --- sweep -----------------------------------------------------------------

def run_cell(samples, config: ExperimentConfig, ratio: float, seed: int, methods,
             out_dir=None, vqvae_cache: dict | None = None) -> list[MetricsRecord]:
    """Proposed and/or baseline runs for one (ratio, seed)."""
    records = []
    try:
        sp = split(samples, config.test_fraction, ratio, seed)
    except Exception as exc:  # noqa: BLE001 - a bad cell must not stop the sweep
        log.error("split failed for ratio=%s seed=%s: %s", ratio, seed, exc)
        return [MetricsRecord(ratio, m, seed, float("nan"), status="failed") for m in methods]
    cell_dir = Path(out_dir) / f"ratio{ratio:g}_seed{seed}" if out_dir and config.save_checkpoints else None
    for method in methods:
        try:
            if method == "proposed":
                key = seed
                if vqvae_cache is not None and key in vqvae_cache:
                    vq, vq_hist = vqvae_cache[key]
                else:
                    vq, vq_hist = train_vqvae(sp, config, seed,
                                              cell_dir / "vqvae" if cell_dir else None)
                    if vqvae_cache is not None:
                        vqvae_cache[key] = (vq, vq_hist)
                model, curve = train_grasp(sp, vq, config, seed,
                                           cell_dir / "proposed" if cell_dir else None)
                vq_curve = vq_hist["total"]
            else:
                model, curve = train_baseline(sp, config, seed,
                                              cell_dir / "baseline" if cell_dir else None)
                vq_curve = []
            rec = evaluate(model, sp.test, config.width_scale, method=method,
                           labelled_ratio=ratio, seed=seed, decode_sigma=config.decode_sigma,
                           angle_threshold=config.angle_threshold)
            rec.vq_loss_curve, rec.grasp_loss_curve = list(vq_curve), list(curve)
            records.append(rec)
        except Exception:  # noqa: BLE001
            log.exception("%s run failed for ratio=%s seed=%s", method, ratio, seed)
            records.append(MetricsRecord(ratio, method, seed, float("nan"), status="failed"))
    return records


def sort_records(records) -> list[MetricsRecord]:
    return sorted(records, key=lambda r: (r.labelled_ratio, r.method, r.seed))


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sort_records(records):
        w.writerow(r.csv_row())
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sweep(config: ExperimentConfig, out_dir=None, samples=None) -> list[MetricsRecord]:
    """Every (ratio, seed, method) cell; writes ``metrics.csv`` and a summary figure."""
    for r in config.ratios:
        if not 0 < r <= 1:
            raise ValueError(f"labelled ratio {r} outside (0, 1]")
    if samples is None:
        samples = load_dataset(config.dataset)
    records, cache = [], {}
    for ratio in config.ratios:
        for seed in config.seeds:
            records += run_cell(samples, config, ratio, seed, config.methods, out_dir, cache)
    records = sort_records(records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(records_to_csv(records))
        from .plotting import plot_sweep
        plot_sweep(records, out_dir / "accuracy_vs_ratio.png")
    return records


def mean_accuracy(records, method: str, ratio: float | None = None) -> float:
    vals = [r.test_accuracy for r in records
            if r.method == method and r.status == "ok"
            and (ratio is None or math.isclose(r.labelled_ratio, ratio))]
    return float(np.mean(vals)) if vals else float("nan")
