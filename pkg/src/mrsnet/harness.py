"""Training, evaluation, and ablation harness.

Implements the experimental protocol: AdamW with decoupled weight decay,
initial learning rate 6e-4 annealed to zero by a cosine schedule over the
total optimizer steps, deterministic seeding, JSON-lines logging, and
best-checkpoint selection by validation mIoU.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import reporting
from .data_model import stratified_split
from .metrics import aggregate, sample_iou
from .network import HashTextEncoder, MRSNet, ToyVisionEncoder, bce_loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters and model wiring; round-trips losslessly through JSON."""

    lr: float = 6e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    use_psr: bool = True
    use_csr: bool = True
    threshold: float = 0.5
    optimizer: str = "adamw"
    schedule: str = "cosine"
    # desk-scale model defaults; the packed cross-scale width grows as
    # sum(dim_s * ratio_s^2), so keep stage_dims modest on CPU
    stage_dims: tuple = (16, 32, 64, 128)
    lang_dim: int = 64
    max_tokens: int = 20
    cma_heads: int = 1
    hfim_heads: int = 4
    hfim_attention_width: int = 256
    pyramid_factors: tuple = (1, 2, 4)
    split_ratios: tuple = (0.7, 0.1, 0.2)
    english_only: bool = True
    dice_weight: float = 0.0
    eval_every: int = 1

    def __post_init__(self):
        self.stage_dims = tuple(self.stage_dims)
        self.pyramid_factors = tuple(self.pyramid_factors)
        self.split_ratios = tuple(self.split_ratios)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class TrainResult:
    checkpoint_best: str
    checkpoint_last: str
    log_path: str
    eval_split: str
    best_metrics: dict
    final_metrics: dict
    history: list = field(default_factory=list)


def cosine_lr(step, total_steps, base_lr):
    """base_lr * (1 + cos(pi * step / total_steps)) / 2; reaches 0 at step T."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def build_model(config):
    dims = config.stage_dims
    encoder = ToyVisionEncoder(stage_dims=dims)
    text_encoder = HashTextEncoder(embed_dim=config.lang_dim, max_tokens=config.max_tokens)
    return MRSNet(
        vision_encoder=encoder,
        text_encoder=text_encoder,
        use_psr=config.use_psr,
        use_csr=config.use_csr,
        cma_heads=config.cma_heads,
        hfim_heads=config.hfim_heads,
        hfim_attention_width=config.hfim_attention_width,
        pyramid_factors=config.pyramid_factors,
        threshold=config.threshold,
    )


def save_checkpoint(model, config, path, **extra):
    payload = {"config": config.to_dict(), "state_dict": model.state_dict()}
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"checkpoint not found: {path}") from exc
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise RuntimeError(f"checkpoint does not match its config: {exc}") from exc
    model.eval()
    return model, config, payload


def _batch_tensors(samples):
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    masks = torch.from_numpy(
        np.stack([s.mask for s in samples]).astype(np.float32)
    ).unsqueeze(1)
    texts = [s.expression.text for s in samples]
    return images, masks, texts


def _first_nonfinite_tensor(model, images, texts):
    """Name the first module (in execution order) that emits non-finite values."""
    offender = []

    def check(name):
        def hook(module, inputs, output):
            tensors = output if isinstance(output, (tuple, list)) else (output,)
            for t in tensors:
                if torch.is_tensor(t) and not torch.isfinite(t).all():
                    if not offender:
                        offender.append(name)
        return hook

    handles = [m.register_forward_hook(check(n)) for n, m in model.named_modules() if n]
    try:
        with torch.no_grad():
            model(images, texts)
    finally:
        for h in handles:
            h.remove()
    return offender[0] if offender else "loss"


def evaluate_samples(model, samples, threshold=0.5, batch_size=8):
    """Forward every sample in eval mode and return per-sample EvalRecords."""
    records = []
    model.eval()
    with torch.no_grad():
        group = []
        for sample in samples:
            if group and sample.image.shape != group[0].image.shape:
                records.extend(_eval_group(model, group, threshold))
                group = []
            group.append(sample)
            if len(group) == batch_size:
                records.extend(_eval_group(model, group, threshold))
                group = []
        if group:
            records.extend(_eval_group(model, group, threshold))
    return records


def _eval_group(model, samples, threshold):
    images, _, texts = _batch_tensors(samples)
    output = model(images, texts)
    preds = output.predicted_mask(threshold).squeeze(1).numpy()
    return [
        sample_iou(pred, s.mask, sample_id=s.sample_id, annotation_type=s.annotation_type)
        for pred, s in zip(preds, samples)
    ]


def _train_samples(index, config):
    samples = index.split_samples("train")
    if config.english_only:
        samples = [s for s in samples if s.expression.language == "en"]
    if not samples:
        raise ValueError("train split is empty (after language filtering)")
    return samples


def train(config, index, out_dir):
    """Run the full training loop; returns checkpoint paths and the log history.

    Deterministic for a fixed config: seeding covers parameter init and the
    shuffle order, and all ops run on CPU.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not index.splits:
        index = stratified_split(index, config.split_ratios, config.seed)

    torch.manual_seed(config.seed)
    shuffle_rng = np.random.default_rng(config.seed)
    model = build_model(config)

    train_samples = _train_samples(index, config)
    eval_split = "val" if index.splits.get("val") else "train"
    eval_samples = index.split_samples(eval_split)

    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda t: 0.5 * (1.0 + math.cos(math.pi * t / total_steps))
    )

    log_path = out_dir / "train_log.jsonl"
    history = []
    best_miou = -1.0
    best_metrics = {}
    final_metrics = {}
    best_path = out_dir / "ckpt_best.pt"
    last_path = out_dir / "ckpt_last.pt"

    with open(log_path, "w") as log:
        def emit(record):
            history.append(record)
            log.write(json.dumps(record) + "\n")

        step = 0
        for epoch in range(config.epochs):
            model.train()
            order = shuffle_rng.permutation(len(train_samples))
            for start in range(0, len(order), config.batch_size):
                batch = [train_samples[i] for i in order[start:start + config.batch_size]]
                images, masks, texts = _batch_tensors(batch)
                optimizer.zero_grad()
                output = model(images, texts)
                loss = bce_loss(output.logits, masks, dice_weight=config.dice_weight)
                if not torch.isfinite(loss):
                    name = _first_nonfinite_tensor(model, images, texts)
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; first non-finite tensor: {name}"
                    )
                lr_used = float(optimizer.param_groups[0]["lr"])
                loss.backward()
                optimizer.step()
                scheduler.step()
                emit(
                    {
                        "event": "step",
                        "step": step,
                        "epoch": epoch,
                        "loss": float(loss.detach()),
                        "lr": lr_used,
                    }
                )
                step += 1

            last_epoch = epoch == config.epochs - 1
            if last_epoch or (epoch + 1) % config.eval_every == 0:
                records = evaluate_samples(
                    model, eval_samples, config.threshold, config.batch_size
                )
                metrics = aggregate(records)
                emit({"event": "epoch", "epoch": epoch, "split": eval_split, **metrics})
                final_metrics = metrics
                if metrics["mIoU"] > best_miou:
                    best_miou = metrics["mIoU"]
                    best_metrics = metrics
                    save_checkpoint(model, config, best_path, epoch=epoch, metrics=metrics)

    save_checkpoint(model, config, last_path, epoch=config.epochs - 1, metrics=final_metrics)
    reporting.render_training_curves(history, out_dir / "training_curves.png")
    return TrainResult(
        checkpoint_best=str(best_path),
        checkpoint_last=str(last_path),
        log_path=str(log_path),
        eval_split=eval_split,
        best_metrics=best_metrics,
        final_metrics=final_metrics,
        history=history,
    )


def evaluate(checkpoint_path, index, split, out_dir=None, threshold=None):
    """Evaluate a checkpoint on one split; optionally write report files."""
    model, config, _ = load_checkpoint(checkpoint_path)
    if not index.splits:
        index = stratified_split(index, config.split_ratios, config.seed)
    samples = index.split_samples(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    records = evaluate_samples(
        model, samples, threshold if threshold is not None else config.threshold,
        config.batch_size,
    )
    report = aggregate(records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "split": split,
            "num_samples": len(records),
            "metrics": reporting.round_report(report),
        }
        reporting.write_json(payload, out_dir / "report.json")
        (out_dir / "report.txt").write_text(reporting.format_metrics_table({split: report}))
        reporting.render_metrics_figure({split: report}, out_dir / "report.png")
    return report, records


ABLATION_GRID = ((True, False), (False, True), (True, True))


def ablate(base_config, index, out_dir, split=None):
    """Train and evaluate the 3-row PSR/CSR on-off grid; returns the rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not index.splits:
        index = stratified_split(index, base_config.split_ratios, base_config.seed)
    if split is None:
        split = "test" if index.splits.get("test") else "train"

    rows = []
    for use_psr, use_csr in ABLATION_GRID:
        config = replace(base_config, use_psr=use_psr, use_csr=use_csr)
        run_dir = out_dir / f"psr_{'on' if use_psr else 'off'}_csr_{'on' if use_csr else 'off'}"
        result = train(config, index, run_dir)
        report, _ = evaluate(result.checkpoint_best, index, split)
        rows.append(
            {
                "use_psr": use_psr,
                "use_csr": use_csr,
                "checkpoint": result.checkpoint_best,
                "metrics": report,
            }
        )

    payload = [
        {
            "use_psr": r["use_psr"],
            "use_csr": r["use_csr"],
            "checkpoint": r["checkpoint"],
            "metrics": reporting.round_report(r["metrics"]),
        }
        for r in rows
    ]
    reporting.write_json({"split": split, "rows": payload}, out_dir / "ablation.json")
    (out_dir / "ablation.txt").write_text(reporting.format_ablation_table(rows))
    reporting.render_ablation_figure(rows, out_dir / "ablation.png")
    return rows
