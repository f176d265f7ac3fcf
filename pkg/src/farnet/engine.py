"""Training, evaluation, prediction, and checkpointing.

The trainer follows the published recipe: Adadelta, constant learning rate,
batch size 1 by default, coarse+fine supervision with one sigma, best
checkpoint selected by validation MRE (training loss when no validation
split is configured). A non-finite loss aborts the run immediately with the
offending sample ids rather than training through the divergence.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, run_config_from_dict, run_config_to_dict
from .datasets import (
    DEFAULT_SDR_RADII,
    DatasetKind,
    DatasetSpec,
    Sample,
    load_dataset,
)
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericsError,
)
from .heatmaps import (
    Frame,
    FrameTransform,
    HeatmapStack,
    LandmarkSet,
    decode_landmarks,
    map_coordinates,
    write_landmark_file,
)
from .losses import coarse_fine_loss, LossConfig
from .metrics import EvalReport, mre, radial_errors, sdr, spine_metrics
from .model import FARNet, ForwardOutput, ModelConfig, Refinement, build_model
from .transforms import PreparedSample, augment, prepare_input

__all__ = [
    "Checkpoint",
    "TrainResult",
    "train",
    "evaluate",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "normalize_mode",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "farnet-checkpoint-v1"
LOW_CONFIDENCE = 0.25


def normalize_mode(model_config: ModelConfig) -> str:
    """Pretrained backbones expect their training statistics; random-init
    backbones see plain [0,1] images."""
    return "imagenet" if model_config.pretrained else "unit"


@dataclass
class Checkpoint:
    """Single-file training snapshot (torch archive, format documented in the README)."""

    model_state: dict
    optimizer_state: dict
    run_config: RunConfig
    epoch: int
    best: dict = field(default_factory=lambda: {"metric": "val_mre", "value": None, "epoch": None})

    def build_model(self) -> FARNet:
        model = build_model(self.run_config.model, self.run_config.weights_path)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_state": checkpoint.model_state,
        "optimizer_state": checkpoint.optimizer_state,
        "run_config": run_config_to_dict(checkpoint.run_config),
        "epoch": checkpoint.epoch,
        "best": checkpoint.best,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a recognized checkpoint file")
    return Checkpoint(
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        run_config=run_config_from_dict(payload["run_config"]),
        epoch=int(payload["epoch"]),
        best=dict(payload["best"]),
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint          # best (by the selection metric)
    last: Checkpoint                # final epoch
    loss_curve: list[float]         # mean training loss per epoch
    val_curve: list[tuple[int, float]]
    best_path: Path | None
    last_path: Path | None


def _set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _write_manifest(ids: list[str], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def _snapshot(model: FARNet, optimizer, config: RunConfig, epoch: int, best: dict) -> Checkpoint:
    model_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(
        model_state=model_state,
        optimizer_state=_clone_state(optimizer.state_dict()),
        run_config=config,
        epoch=epoch,
        best=dict(best),
    )


def _clone_state(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_state(v) for v in obj]
    return obj


def train(config: RunConfig) -> TrainResult:
    """Run the full training loop and return best/last checkpoints + curves."""
    _set_determinism(config.seed, config.deterministic)
    ckpt_dir = Path(config.checkpoint_dir)

    samples = load_dataset(config.dataset)
    if not samples:
        raise DataError(f"no training samples for {config.dataset.kind.value}")
    val_samples: list[Sample] = []
    if config.val_split:
        val_samples = load_dataset(config.dataset.with_(split=config.val_split))
    _write_manifest([s.id for s in samples], ckpt_dir / "manifest_train.txt")
    if val_samples:
        _write_manifest([s.id for s in val_samples], ckpt_dir / f"manifest_{config.val_split}.txt")

    model = build_model(config.model, config.weights_path)
    model.train()
    optimizer = torch.optim.Adadelta(model.parameters(), lr=config.optimizer.lr)
    loss_cfg = config.loss
    if config.model.refinement == Refinement.NAIVE:
        # no guidance head supervision in the naive-refinement ablation
        loss_cfg = LossConfig(
            alpha=loss_cfg.alpha,
            loss_kind=loss_cfg.loss_kind,
            head_weights=(0.0, loss_cfg.head_weights[1]),
            reduction=loss_cfg.reduction,
        )
    norm = normalize_mode(config.model)
    aug_cfg = config.dataset.augmentation

    loss_curve: list[float] = []
    val_curve: list[tuple[int, float]] = []
    best = {"metric": "val_mre" if val_samples else "train_loss", "value": None, "epoch": None}
    best_ckpt: Checkpoint | None = None
    started = time.time()

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng((config.seed, epoch)).permutation(len(samples))
        epoch_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            prepared: list[PreparedSample] = []
            for idx in chunk:
                sample = samples[int(idx)]
                if aug_cfg.enabled:
                    sample = augment(sample, aug_cfg, stream=epoch)
                prepared.append(prepare_input(sample, config.dataset, normalize=norm))
            batch = torch.stack([p.image for p in prepared])
            out: ForwardOutput = model(batch)
            losses = coarse_fine_loss(
                out.coarse, out.fine, [p.landmarks for p in prepared], config.sigma, loss_cfg
            )
            if not torch.isfinite(losses.total):
                ids = [p.sample.id for p in prepared]
                raise NumericsError(
                    f"non-finite loss {float(losses.total)} at epoch {epoch} "
                    f"step {start // config.batch_size} on samples {ids} "
                    f"(coarse={float(losses.coarse)}, fine={float(losses.fine)})"
                )
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            epoch_losses.append(float(losses.total.detach()))

        epoch_loss = float(np.mean(epoch_losses))
        loss_curve.append(epoch_loss)

        candidate_value = epoch_loss
        if val_samples and (epoch % config.val_every == 0 or epoch == config.epochs):
            report = evaluate(
                model,
                config.dataset.with_(split=config.val_split),
                samples=val_samples,
                normalize=norm,
            )
            val_curve.append((epoch, report.mre_mm))
            candidate_value = report.mre_mm
            log.info(
                "epoch %d/%d loss %.6f val MRE %.4f %s",
                epoch, config.epochs, epoch_loss, report.mre_mm, report.unit,
            )
        else:
            log.info("epoch %d/%d loss %.6f", epoch, config.epochs, epoch_loss)

        if val_samples and epoch % config.val_every != 0 and epoch != config.epochs:
            pass  # no fresh validation metric this epoch, keep current best
        elif best["value"] is None or candidate_value < best["value"]:
            best.update(value=candidate_value, epoch=epoch)
            best_ckpt = _snapshot(model, optimizer, config, epoch, best)
            save_checkpoint(best_ckpt, ckpt_dir / "best.pt")

        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            save_checkpoint(_snapshot(model, optimizer, config, epoch, best), ckpt_dir / "last.pt")

    (ckpt_dir / "loss_curve.txt").write_text(
        "".join(f"{e + 1} {v:.10g}\n" for e, v in enumerate(loss_curve)), encoding="utf-8"
    )
    last_ckpt = _snapshot(model, optimizer, config, config.epochs, best)
    if best_ckpt is None:
        best_ckpt = last_ckpt
        save_checkpoint(best_ckpt, ckpt_dir / "best.pt")
    log.info("training finished in %.1fs, best %s %.6f at epoch %s",
             time.time() - started, best["metric"], best["value"], best["epoch"])
    return TrainResult(
        checkpoint=best_ckpt,
        last=last_ckpt,
        loss_curve=loss_curve,
        val_curve=val_curve,
        best_path=ckpt_dir / "best.pt",
        last_path=ckpt_dir / "last.pt",
    )


def _decode_to_original(
    stack: HeatmapStack, prepared: PreparedSample
) -> LandmarkSet:
    """Decode a head's stack and map the landmarks back to the original frame."""
    decoded = decode_landmarks(stack, refine=True)
    net_w, net_h = prepared.net_size
    if stack.grid.stride_wrt_input == 2:
        to_net = FrameTransform(
            (stack.grid.width, stack.grid.height), (net_w, net_h),
            decoded.frame, Frame.NET_INPUT,
        )
        decoded = map_coordinates(decoded, to_net)
    else:
        decoded = decoded.with_frame(Frame.NET_INPUT)
    return map_coordinates(decoded, prepared.transform.inverse())


def evaluate(
    model_or_checkpoint,
    spec: DatasetSpec,
    *,
    samples: list[Sample] | None = None,
    radii=None,
    predict_fn=None,
    normalize: str | None = None,
) -> EvalReport:
    """Decode every sample of a split and aggregate the dataset's metrics.

    `predict_fn(prepared) -> HeatmapStack` replaces the model entirely when
    given (used to validate the metric path against oracle heatmaps).
    Model parameters and modes are restored afterwards; evaluation never
    mutates the model.
    """
    model: FARNet | None = None
    if predict_fn is None:
        if isinstance(model_or_checkpoint, Checkpoint):
            model = model_or_checkpoint.build_model()
        elif isinstance(model_or_checkpoint, FARNet):
            model = model_or_checkpoint
        else:
            raise ConfigError(
                f"evaluate needs a model, checkpoint, or predict_fn, got {type(model_or_checkpoint)}"
            )
        if model.config.k_landmarks != spec.k_landmarks:
            raise ConfigError(
                f"model regresses {model.config.k_landmarks} landmarks, "
                f"dataset has {spec.k_landmarks}"
            )
        if normalize is None:
            normalize = normalize_mode(model.config)
    elif normalize is None:
        normalize = "unit"

    if samples is None:
        samples = load_dataset(spec)
    if not samples:
        raise DataError(f"no samples to evaluate for {spec.kind.value}:{spec.split}")

    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()

    errors = np.zeros((len(samples), spec.k_landmarks), dtype=np.float64)
    pred_sets: list[LandmarkSet] = []
    gt_sets: list[LandmarkSet] = []
    sizes: list[tuple[int, int]] = []
    try:
        with torch.no_grad():
            for i, sample in enumerate(samples):
                prepared = prepare_input(sample, spec, normalize=normalize)
                if predict_fn is not None:
                    stack = predict_fn(prepared)
                else:
                    out: ForwardOutput = model(prepared.image[None])
                    stack = out.best_stack(0)
                pred = _decode_to_original(stack, prepared)
                gt = sample.landmarks_original
                errors[i] = radial_errors(pred, gt, sample.spacing)
                pred_sets.append(pred)
                gt_sets.append(gt)
                sizes.append(sample.original_size)
    finally:
        if model is not None and was_training:
            model.train()

    flat = errors.ravel()
    mean_err, std_err = mre(flat)
    if radii is None:
        radii = DEFAULT_SDR_RADII.get(spec.kind, ())
    rates = sdr(flat, radii) if radii else {}
    report = EvalReport(
        mre_mm=mean_err,
        std_mm=std_err,
        sdr=rates,
        per_landmark=[float(v) for v in errors.mean(axis=0)],
        n_images=len(samples),
        unit="px" if spec.kind == DatasetKind.SPINE else "mm",
    )
    if spec.kind == DatasetKind.SPINE:
        report.mse_fraction, report.pearson_rho = spine_metrics(pred_sets, gt_sets, sizes)
    return report


def predict(
    checkpoint: Checkpoint | str | Path,
    image_path: str | Path,
    out_dir: str | Path,
) -> LandmarkSet:
    """Detect landmarks on one image; write a landmark file and an overlay.

    Emits <stem>_landmarks.txt (one "x,y" per line, original pixel frame)
    and <stem>_overlay.png with detected points drawn (low-confidence points
    hollow). Prints one confidence line per landmark.
    """
    from PIL import Image, ImageDraw

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = checkpoint.build_model()
    spec = checkpoint.run_config.dataset

    image_path = Path(image_path)
    try:
        with Image.open(image_path) as img:
            rgb = img.convert("RGB")
            gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {image_path}: {exc}") from exc
    h, w = gray.shape
    sample = Sample(
        image=torch.from_numpy(np.repeat(gray[None], 3, axis=0)),
        landmarks_original=LandmarkSet(np.zeros((spec.k_landmarks, 2)), Frame.ORIGINAL),
        original_size=(w, h),
        spacing=None,
        id=image_path.stem,
    )
    prepared = prepare_input(sample, spec, normalize=normalize_mode(model.config))
    with torch.no_grad():
        out: ForwardOutput = model(prepared.image[None])
    pred = _decode_to_original(out.best_stack(0), prepared)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lm_path = out_dir / f"{image_path.stem}_landmarks.txt"
    write_landmark_file(pred, lm_path)

    draw = ImageDraw.Draw(rgb)
    radius = max(2, int(round(min(w, h) * 0.006)))
    conf = pred.confidences if pred.confidences is not None else np.ones(pred.k)
    for k, ((x, y), c) in enumerate(zip(pred.points, conf)):
        box = (x - radius, y - radius, x + radius, y + radius)
        if c >= LOW_CONFIDENCE:
            draw.ellipse(box, fill=(255, 0, 0))
        else:
            draw.ellipse(box, outline=(255, 220, 0), width=2)
        flag = "" if c >= LOW_CONFIDENCE else "  LOW"
        print(f"landmark {k:3d}: ({x:9.3f}, {y:9.3f})  confidence {c:.3f}{flag}")
    overlay_path = out_dir / f"{image_path.stem}_overlay.png"
    rgb.save(overlay_path)
    log.info("wrote %s and %s", lm_path, overlay_path)
    return pred
