"""Training/evaluation harness: optimization loop, schedule, checkpoints.

One training process owns the weights. Both supervision modes run through
the same loop; the only difference is the sampler (pseudo pairs built
in-batch versus stored bitemporal pairs). Every step appends one JSON
record to the run log, and checkpoints are plain zip archives holding the
weight arrays plus a provenance manifest (see README for the byte-level
format).
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import sys
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from .core import IGNORE_VALUE
from .heads import HeadConfig
from .losses import LossConfig, total_loss
from .model import ChangeDetector, build_backbone
from .pairing import (
    JitterBounds,
    PairingConfig,
    assign_change,
    build_pseudo_pairs,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CHECKPOINT_FORMAT_VERSION = 1


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 2000
    batch_size: int = 8
    base_lr: float = 0.03
    lr_gamma: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0
    supervision: str = "single_temporal"  # or "bitemporal"
    backbone: str = "tiny"
    backbone_width: int = 16
    backbone_out_channels: int = 32
    eval_every: int = 0
    change_threshold: float = 0.5
    pairing: PairingConfig = field(default_factory=PairingConfig)
    loss: Optional[LossConfig] = None  # None = pick by dataset class count
    head_n_conv_layers: int = 4
    head_conv_channels: int = 16
    head_difference_branch: bool = True
    head_aggregation: str = "abs_diff"
    augment: data_mod.AugmentConfig = field(default_factory=data_mod.AugmentConfig.disabled)

    def __post_init__(self):
        if self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("max_steps and batch_size must be >= 1")
        if self.supervision not in ("single_temporal", "bitemporal"):
            raise ConfigError(f"unknown supervision mode {self.supervision!r}")


def config_from_toml(path: Path) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    try:
        if "pairing" in raw:
            p = dict(raw["pairing"])
            if "jitter_bounds" in p:
                p["jitter_bounds"] = JitterBounds(**p["jitter_bounds"])
            raw["pairing"] = PairingConfig(**p)
        if raw.get("loss") is not None:
            raw["loss"] = LossConfig(**raw["loss"])
        if "augment" in raw:
            a = dict(raw["augment"])
            if "scale_range" in a:
                a["scale_range"] = tuple(a["scale_range"])
            raw["augment"] = data_mod.AugmentConfig(**a)
        return TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def poly_lr(step: int, max_steps: int, base_lr: float, gamma: float) -> float:
    """base_lr * (1 - step/max_steps)^gamma."""
    if step < 0 or step > max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    return base_lr * (1.0 - step / max_steps) ** gamma


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _model_config(cfg: TrainConfig, num_classes: int, in_channels: int) -> dict:
    return {
        "backbone": cfg.backbone,
        "backbone_kwargs": {
            "in_channels": in_channels,
            "width": cfg.backbone_width,
            "out_channels": cfg.backbone_out_channels,
        },
        "num_classes": num_classes,
        "head": {
            "n_conv_layers": cfg.head_n_conv_layers,
            "conv_channels": cfg.head_conv_channels,
            "difference_branch": cfg.head_difference_branch,
            "aggregation": cfg.head_aggregation,
        },
    }


def build_model(model_config: dict) -> ChangeDetector:
    backbone = build_backbone(model_config["backbone"], **model_config["backbone_kwargs"])
    head = HeadConfig(
        in_channels=backbone.out_channels,
        upsample_scale=backbone.output_stride,
        **model_config["head"],
    )
    return ChangeDetector(backbone, model_config["num_classes"], head)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: Path, model: ChangeDetector, model_config: dict,
                    train_config: dict, step: int, seed: int) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model_config,
        "train_config": train_config,
        "config_hash": _config_hash(model_config),
        "step": step,
        "seed": seed,
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("weights.npz", buf.getvalue())


def load_checkpoint(path: Path) -> Tuple[ChangeDetector, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format version {manifest.get('format_version')}"
            )
        with zf.open("weights.npz") as fh:
            arrays = np.load(io.BytesIO(fh.read()))
            state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
    model = build_model(manifest["model_config"])
    model.load_state_dict(state)
    model.eval()
    return model, manifest


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _pairs_to_tensors(pairs, ignore_value=IGNORE_VALUE):
    image_a = torch.from_numpy(np.stack([p.image_a.data for p in pairs]))
    image_b = torch.from_numpy(np.stack([p.image_b.data for p in pairs]))
    mask_a = torch.from_numpy(np.stack([p.mask_a.labels for p in pairs]).astype(np.int64))
    mask_b = torch.from_numpy(np.stack([p.mask_b.labels for p in pairs]).astype(np.int64))
    change = torch.from_numpy(np.stack([p.change.values for p in pairs]).astype(np.int64))
    return image_a, image_b, mask_a, mask_b, change


def _infinite_batches(manifest, split: str, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from data_mod.iterate(manifest, split, batch_size, seed + epoch)
        epoch += 1


def _pick_loss(cfg: TrainConfig, num_classes: int) -> LossConfig:
    if cfg.loss is not None:
        return cfg.loss
    semantic = "bce_plus_dice" if num_classes == 2 else "cross_entropy"
    return LossConfig(semantic_loss=semantic)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    final_losses: Dict[str, float]


def train(cfg: TrainConfig, data_root: Path, out_dir: Path,
          label_assigner=None) -> TrainResult:
    """Run the optimization loop and write checkpoint + per-step log.

    ``label_assigner`` overrides the change-target assigner and exists for
    ablation experiments only (e.g. the logical-or contrast); production
    training always uses the inequality assigner.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = data_mod.load_manifest(Path(data_root))
    if "train" not in manifest.splits:
        raise data_mod.DataError(f"dataset at {data_root} has no train split")
    train_mode = data_mod.split_mode(manifest, "train")
    if cfg.supervision == "bitemporal" and train_mode != "bitemporal":
        raise ConfigError("bitemporal supervision requires a bitemporal train split")
    if cfg.supervision == "single_temporal" and train_mode != "single_temporal":
        raise ConfigError("single-temporal supervision requires a single-temporal train split")

    num_classes = manifest.num_classes
    loss_cfg = _pick_loss(cfg, num_classes)
    model_classes = 1 if loss_cfg.semantic_loss == "bce_plus_dice" else num_classes

    torch.manual_seed(cfg.seed)
    sample0 = data_mod._load_single(manifest, "train", manifest.splits["train"][0])
    in_channels = sample0[0].channels
    model_config = _model_config(cfg, model_classes, in_channels)
    model = build_model(model_config)
    model.train()

    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_pair = np.random.default_rng(seeds[0])
    rng_aug = np.random.default_rng(seeds[1])
    data_seed = int(np.random.default_rng(seeds[2]).integers(2 ** 31))
    batches = _infinite_batches(manifest, "train", cfg.batch_size, data_seed)

    assigner = label_assigner if label_assigner is not None else assign_change
    log_path = out_dir / "train_log.jsonl"
    checkpoint_path = out_dir / "checkpoint.zip"
    final_losses: Dict[str, float] = {}

    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(cfg.max_steps):
            lr = poly_lr(step, cfg.max_steps, cfg.base_lr, cfg.lr_gamma)
            for group in optimizer.param_groups:
                group["lr"] = lr

            batch = next(batches)
            if cfg.supervision == "single_temporal":
                augmented = [
                    data_mod.augment_train(img, msk, cfg.augment, rng_aug)
                    for img, msk in batch
                ]
                pairs = build_pseudo_pairs(augmented, cfg.pairing, rng_pair)
                image_a, image_b, mask_a, mask_b, change = _pairs_to_tensors(pairs)
                if label_assigner is not None:
                    change = torch.from_numpy(np.stack([
                        assigner(p.mask_a, p.mask_b).values for p in pairs
                    ]).astype(np.int64))
            else:
                image_a = torch.from_numpy(np.stack([s.image_a.data for s in batch]))
                image_b = torch.from_numpy(np.stack([s.image_b.data for s in batch]))
                mask_a = torch.from_numpy(np.stack([s.mask_a.labels for s in batch]).astype(np.int64))
                mask_b = torch.from_numpy(np.stack([s.mask_b.labels for s in batch]).astype(np.int64))
                change = torch.from_numpy(np.stack([s.change.values for s in batch]).astype(np.int64))

            bundle = model.forward_pair(image_a, image_b, mode="train")
            loss, breakdown = total_loss(bundle, mask_a, mask_b, change, loss_cfg)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            record = {"step": step, "lr": lr}
            record.update({k: float(v.detach()) for k, v in breakdown.items()})
            log.write(json.dumps(record) + "\n")
            final_losses = {k: float(v.detach()) for k, v in breakdown.items()}

            if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and "val" in manifest.splits:
                model.eval()
                scores = evaluate_model(model, manifest, "val", cfg.change_threshold)
                model.train()
                log.write(json.dumps({"step": step, "eval": "val", **_flatten(scores)}) + "\n")

    model.eval()
    save_checkpoint(checkpoint_path, model, model_config, config_to_dict(cfg),
                    cfg.max_steps, cfg.seed)
    return TrainResult(checkpoint_path, log_path, cfg.max_steps, final_losses)


def _flatten(scores: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in scores.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        elif isinstance(value, (int, float, bool, str)):
            out[name] = value
    return out


# ---------------------------------------------------------------------------
# Evaluation / prediction
# ---------------------------------------------------------------------------

@torch.no_grad()
def evaluate_model(model: ChangeDetector, manifest, split: str,
                   threshold: float = 0.5) -> dict:
    """Stream a bitemporal split, accumulate confusion matrices, score.

    Always reports the change head and the post-classification (DPCC)
    readout of the same weights; multi-class models additionally get the
    semantic-change scores from the decoupled from-to readout.
    """
    if data_mod.split_mode(manifest, split) != "bitemporal":
        raise data_mod.DataError(f"split {split!r} is not bitemporal; cannot evaluate change")
    cm_change = metrics_mod.ConfusionMatrix(2)
    cm_dpcc = metrics_mod.ConfusionMatrix(2)
    multi = model.num_classes > 1
    if multi:
        n_cat = metrics_mod.num_semantic_change_categories(manifest.num_classes)
        cm_semantic = metrics_mod.ConfusionMatrix(n_cat)

    for batch in data_mod.iterate(manifest, split, 1, seed=0):
        for s in batch:
            ia = torch.from_numpy(np.array(s.image_a.data))
            ib = torch.from_numpy(np.array(s.image_b.data))
            pred = model.predict_change(ia, ib, threshold)
            dpcc = model.dpcc_predict(ia, ib, threshold)
            cm_change.update(s.change.values, pred.values)
            cm_dpcc.update(s.change.values, dpcc.values)
            if multi:
                map_a, map_b, change = model.predict_semantic_change(ia, ib, threshold)
                ref_cat = metrics_mod.semantic_change_category(
                    s.mask_a.labels, s.mask_b.labels, manifest.num_classes)
                # from-to readout: the to-class differs only on predicted-change cells
                pred_to = np.where(change.values == 1, map_b, map_a)
                pred_cat = metrics_mod.semantic_change_category(map_a, pred_to,
                                                                manifest.num_classes)
                ref_ig = (s.mask_a.labels == IGNORE_VALUE) | (s.mask_b.labels == IGNORE_VALUE)
                pred_cat = np.where(ref_ig, IGNORE_VALUE, pred_cat)
                cm_semantic.update(ref_cat, pred_cat)

    report = {
        "change": metrics_mod.binary_scores(cm_change),
        "dpcc": metrics_mod.binary_scores(cm_dpcc),
    }
    if multi:
        report["semantic_change"] = metrics_mod.second_scores(cm_semantic, cm_change)
    return report


def evaluate(checkpoint_path: Path, data_root: Path, split: str,
             threshold: float = 0.5, record_path: Optional[Path] = None,
             error_map_dir: Optional[Path] = None) -> dict:
    model, manifest_meta = load_checkpoint(Path(checkpoint_path))
    manifest = data_mod.load_manifest(Path(data_root))
    report = evaluate_model(model, manifest, split, threshold)
    if error_map_dir is not None:
        error_map_dir = Path(error_map_dir)
        error_map_dir.mkdir(parents=True, exist_ok=True)
        _write_error_maps(model, manifest, split, threshold, error_map_dir)
    if record_path is not None:
        metrics_mod.write_metric_record(
            _flatten(report),
            record_path,
            extra={"split": split, "checkpoint": str(checkpoint_path),
                   "step": manifest_meta["step"]},
        )
    return report


@torch.no_grad()
def _write_error_maps(model, manifest, split, threshold, out_dir: Path) -> None:
    split_ids = manifest.splits[split]
    for tile_id in split_ids:
        s = data_mod._load_bitemporal(manifest, split, tile_id)
        ia = torch.from_numpy(np.array(s.image_a.data))
        ib = torch.from_numpy(np.array(s.image_b.data))
        pred = model.predict_change(ia, ib, threshold)
        cats = metrics_mod.error_map(pred, s.change)
        metrics_mod.save_error_map(cats, out_dir / f"{tile_id}.png")


@torch.no_grad()
def predict(checkpoint_path: Path, data_root: Path, split: str, out_dir: Path,
            threshold: float = 0.5) -> List[Path]:
    """Write a binary change PNG per tile of a bitemporal split."""
    model, _ = load_checkpoint(Path(checkpoint_path))
    manifest = data_mod.load_manifest(Path(data_root))
    if data_mod.split_mode(manifest, split) != "bitemporal":
        raise data_mod.DataError(f"split {split!r} is not bitemporal; nothing to predict on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for tile_id in manifest.splits[split]:
        s = data_mod._load_bitemporal(manifest, split, tile_id)
        ia = torch.from_numpy(np.array(s.image_a.data))
        ib = torch.from_numpy(np.array(s.image_b.data))
        pred = model.predict_change(ia, ib, threshold)
        path = out_dir / f"{tile_id}.png"
        data_mod.save_mask_png(pred.values, path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def read_log(path: Path) -> Tuple[List[dict], List[dict]]:
    steps, evals = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        (evals if "eval" in record else steps).append(record)
    return steps, evals


def report(log_paths: List[Path], out_dir: Path) -> List[Path]:
    """Emit plot-ready CSVs: per-step loss curves (with the positive /
    negative BCE decomposition) and, when present, eval-score curves that
    compare the change head against the post-classification readout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for log_path in log_paths:
        stem = Path(log_path).stem
        steps, evals = read_log(log_path)
        if steps:
            keys = ["step", "lr", "total", "seg", "change",
                    "change_bce_pos", "change_bce_neg"]
            csv_path = out_dir / f"{stem}_loss_curve.csv"
            with open(csv_path, "w", encoding="utf-8") as fh:
                fh.write(",".join(keys) + "\n")
                for record in steps:
                    fh.write(",".join(str(record.get(k, "")) for k in keys) + "\n")
            written.append(csv_path)
        if evals:
            keys = sorted({k for record in evals for k in record} - {"eval"})
            csv_path = out_dir / f"{stem}_eval_curve.csv"
            with open(csv_path, "w", encoding="utf-8") as fh:
                fh.write("eval," + ",".join(keys) + "\n")
                for record in evals:
                    fh.write(record["eval"] + "," +
                             ",".join(str(record.get(k, "")) for k in keys) + "\n")
            written.append(csv_path)
    return written


def steps_to_change_loss(log_path: Path, threshold: float,
                         window: int = 10) -> Optional[int]:
    """First step whose trailing-window mean change loss drops below
    ``threshold``; None if never reached. Used for convergence studies."""
    steps, _ = read_log(log_path)
    values = [record["change"] for record in steps]
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        if float(np.mean(values[lo:i + 1])) < threshold:
            return steps[i]["step"]
    return None
