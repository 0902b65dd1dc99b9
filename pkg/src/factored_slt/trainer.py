"""Training orchestration for the two-stage pipeline and the joint baseline.

One engine trains any assembled pipeline: single-cycle cosine annealing with
per-component peak learning rates, SGD with momentum or Adam, label-smoothed
cross entropy, global-norm gradient clipping, per-epoch checkpoints, and an
append-only CSV metrics log. Runs are bitwise reproducible under fixed seeds
in strict single-threaded mode because batch order is a stateless function of
(seed, epoch) and the torch generator state travels inside checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    module_tensors,
    save_checkpoint,
)
from .corpus import Corpus, SignVideo, Vocabulary, collate
from .diagnostics import (
    BACKEND_LAYER,
    ENCODER_LAYER,
    NormTrace,
    WatchHandle,
    export_trace,
    watch,
)
from .evalkit import EvalReport, evaluate_model
from .light_t import LightT, LightTConfig
from .llm_stage import FreezePolicy, TinySeq2SeqBackend, apply_freeze
from .pipeline import TranslationPipeline, batch_to_tensors
from .transformer import FeatureAdapter
from .utils import epoch_rng, seed_all
from .visual_encoder import VisualEncoder, VisualEncoderConfig


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class StageConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    lr_groups: dict[str, float] = field(default_factory=dict)
    lr_min: float = 0.0
    batch_size: int = 8
    epochs: int = 1
    label_smoothing: float = 0.2
    seed: int = 0
    grad_clip: float = 5.0
    eval_every: int = 1

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not self.lr_groups:
            raise ValueError("lr_groups must name at least one component")
        for name, lr in self.lr_groups.items():
            if lr <= 0:
                raise ValueError(f"learning rate for {name!r} must be > 0, got {lr}")
        if self.lr_min < 0:
            raise ValueError(f"lr_min must be >= 0, got {self.lr_min}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(
                f"label_smoothing must lie in [0, 1), got {self.label_smoothing}"
            )

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "momentum": self.momentum,
            "lr_groups": dict(self.lr_groups),
            "lr_min": self.lr_min,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "label_smoothing": self.label_smoothing,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
            "eval_every": self.eval_every,
        }

    @staticmethod
    def from_dict(raw: dict) -> "StageConfig":
        cfg = StageConfig(**raw)
        cfg.validate()
        return cfg


def default_stage1_config(epochs: int = 30, seed: int = 0) -> StageConfig:
    """Visual initialing: the whole network trained jointly with SGD."""
    return StageConfig(
        optimizer="sgd",
        momentum=0.9,
        lr_groups={"visual_encoder": 1e-2, "adapter": 1e-2, "light_t": 1e-2},
        batch_size=8,
        epochs=epochs,
        seed=seed,
    )


def default_stage2_config(epochs: int = 20, seed: int = 0) -> StageConfig:
    """Backend fine-tuning: Adam with a slow backend and a fast adapter."""
    return StageConfig(
        optimizer="adam",
        lr_groups={"adapter": 1e-3, "backend": 1e-5},
        batch_size=16,
        epochs=epochs,
        seed=seed,
    )


def default_e2e_config(epochs: int, seed: int = 0) -> StageConfig:
    """Joint baseline: everything trained in one stage under the
    visual-initialing recipe, since the baseline replaces that stage."""
    return StageConfig(
        optimizer="sgd",
        momentum=0.9,
        lr_groups={"visual_encoder": 1e-2, "adapter": 1e-2, "backend": 1e-2},
        batch_size=8,
        epochs=epochs,
        seed=seed,
    )


@dataclass(frozen=True)
class EvalSettings:
    beam: int = 5
    max_len: int = 32
    length_normalize: bool = True
    dev_max_samples: int | None = 64

    def to_dict(self) -> dict:
        return {
            "beam": self.beam,
            "max_len": self.max_len,
            "length_normalize": self.length_normalize,
            "dev_max_samples": self.dev_max_samples,
        }

    @staticmethod
    def from_dict(raw: dict) -> "EvalSettings":
        return EvalSettings(**raw)


def cosine_lr(step: int, t_max: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Single-cycle cosine annealing from lr_max at step 0 down to lr_min at
    t_max; later steps clamp to lr_min."""
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > t_max:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / t_max))


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path
    epoch_losses: list[float]
    step_losses: list[float]
    dev_history: list[dict]
    trace: NormTrace | None = None


# -- pipeline builders --------------------------------------------------------


def build_stage1_pipeline(
    visual_cfg: VisualEncoderConfig, light_t_cfg: LightTConfig
) -> TranslationPipeline:
    # construction order (visual, core, adapter) is shared with the joint
    # builder so that equal seeds produce equal initializations
    visual = VisualEncoder(visual_cfg)
    core = LightT(light_t_cfg)
    adapter = FeatureAdapter(
        visual_cfg.feature_dim, core.embedding_width, core.embedding_width
    )
    return TranslationPipeline(visual, adapter, core, tap="sign_wise")


def _adapter_in_dim(visual_cfg: VisualEncoderConfig, tap: str, light_t_hidden: int | None) -> int:
    if tap in ("frame_wise", "sign_wise"):
        return visual_cfg.feature_dim
    if light_t_hidden is None:
        raise ValueError("hidden_states tap requires the stage-1 model width")
    return light_t_hidden


def build_e2e_pipeline(
    visual_cfg: VisualEncoderConfig,
    core,
    tap: str = "sign_wise",
) -> TranslationPipeline:
    """core may be a module or a zero-argument factory; a factory is invoked
    in the same construction slot stage 1 builds its translation head in."""
    visual = VisualEncoder(visual_cfg)
    if callable(core) and not isinstance(core, torch.nn.Module):
        core = core()
    adapter = FeatureAdapter(
        _adapter_in_dim(visual_cfg, tap, None), core.embedding_width, core.embedding_width
    )
    return TranslationPipeline(visual, adapter, core, tap=tap)


def build_stage2_pipeline(
    stage1_checkpoint: Checkpoint,
    backend: TinySeq2SeqBackend,
    tap: str = "sign_wise",
    freeze: FreezePolicy = FreezePolicy(),
) -> TranslationPipeline:
    """Fresh adapter and backend over the stage-1 visual encoder; the frozen
    parts are loaded from the checkpoint and pinned to inference mode."""
    model_cfg = stage1_checkpoint.model_config
    visual_cfg = VisualEncoderConfig.from_dict(model_cfg["visual"])
    visual = VisualEncoder(visual_cfg)
    stage1_checkpoint.load_group_into("visual_encoder", visual)
    vl_adapter = None
    lt_encoder = None
    light_t_hidden = None
    if tap == "hidden_states":
        if model_cfg.get("core", {}).get("type") != "light_t":
            raise ValueError(
                "hidden_states tap requires a stage-1 checkpoint with a light_t core"
            )
        lt_cfg = LightTConfig.from_dict(model_cfg["core"]["config"])
        light_t_hidden = lt_cfg.hidden
        vl_adapter = FeatureAdapter(visual_cfg.feature_dim, lt_cfg.hidden, lt_cfg.hidden)
        stage1_checkpoint.load_group_into("adapter", vl_adapter)
        lt_encoder = LightT(lt_cfg)
        stage1_checkpoint.load_group_into("light_t", lt_encoder)
    adapter = FeatureAdapter(
        _adapter_in_dim(visual_cfg, tap, light_t_hidden),
        backend.embedding_width,
        backend.embedding_width,
    )
    pipeline = TranslationPipeline(
        visual, adapter, backend, tap=tap, vl_adapter=vl_adapter, lt_encoder=lt_encoder
    )
    return apply_freeze(pipeline, freeze)


def pipeline_model_config(pipeline: TranslationPipeline, vocab: Vocabulary) -> dict:
    core = pipeline.core
    if isinstance(core, LightT):
        core_cfg = {"type": "light_t", "config": core.config.to_dict()}
    elif isinstance(core, TinySeq2SeqBackend):
        core_cfg = {"type": "backend", "config": core.config.to_dict()}
    else:
        core_cfg = {"type": type(core).__name__, "config": {}}
    return {
        "visual": pipeline.visual_encoder.config.to_dict(),
        "core": core_cfg,
        "tap": pipeline.tap,
        "adapter": {
            "in_dim": pipeline.adapter.in_dim,
            "out_dim": pipeline.adapter.out_dim,
            "hidden_dim": pipeline.adapter.fc1.out_features,
        },
        "vocab_tokens": list(vocab.tokens),
        "has_vl_adapter": pipeline.vl_adapter is not None,
        "has_lt_encoder": pipeline.lt_encoder is not None,
    }


def pipeline_from_model_config(model_cfg: dict) -> tuple[TranslationPipeline, Vocabulary]:
    """Rebuild an architecture (random weights) from a checkpoint manifest."""
    vocab = Vocabulary(tokens=tuple(model_cfg["vocab_tokens"]))
    visual_cfg = VisualEncoderConfig.from_dict(model_cfg["visual"])
    visual = VisualEncoder(visual_cfg)
    core_cfg = model_cfg["core"]
    if core_cfg["type"] == "light_t":
        core: torch.nn.Module = LightT(LightTConfig.from_dict(core_cfg["config"]))
    elif core_cfg["type"] == "backend":
        from .llm_stage import TinyBackendConfig

        core = TinySeq2SeqBackend(
            TinyBackendConfig.from_dict(core_cfg["config"]), vocab=vocab
        )
    else:
        raise CheckpointError(f"cannot rebuild core of type {core_cfg['type']!r}")
    adapter = FeatureAdapter(
        model_cfg["adapter"]["in_dim"],
        model_cfg["adapter"]["out_dim"],
        model_cfg["adapter"]["hidden_dim"],
    )
    vl_adapter = None
    lt_encoder = None
    if model_cfg.get("has_vl_adapter"):
        lt_cfg = LightTConfig.from_dict(model_cfg["stage1_core"])
        vl_adapter = FeatureAdapter(visual_cfg.feature_dim, lt_cfg.hidden, lt_cfg.hidden)
        lt_encoder = LightT(lt_cfg)
    pipeline = TranslationPipeline(
        visual,
        adapter,
        core,
        tap=model_cfg["tap"],
        vl_adapter=vl_adapter,
        lt_encoder=lt_encoder,
    )
    return pipeline, vocab


def load_pipeline(checkpoint: Checkpoint) -> tuple[TranslationPipeline, Vocabulary]:
    """Materialize the full model stored in a checkpoint."""
    model_cfg = dict(checkpoint.model_config)
    if model_cfg.get("has_lt_encoder"):
        model_cfg["stage1_core"] = checkpoint.extra["stage1_core"]
    pipeline, vocab = pipeline_from_model_config(model_cfg)
    for name, module in pipeline.component_modules().items():
        checkpoint.load_group_into(name, module)
    pipeline.eval()
    return pipeline, vocab


# -- optimizer wiring ---------------------------------------------------------


def build_optimizer(pipeline: TranslationPipeline, cfg: StageConfig) -> torch.optim.Optimizer:
    """One optimizer group per trainable component. A component without a
    configured rate (e.g. a deliberately unfrozen visual encoder in stage 2)
    falls back to the adapter's rate."""
    groups = []
    for name, module in pipeline.component_modules().items():
        params = [p for p in module.parameters() if p.requires_grad]
        if not params:
            continue
        lr = cfg.lr_groups.get(name, cfg.lr_groups.get("adapter"))
        if lr is None:
            raise ValueError(
                f"no learning rate configured for trainable component {name!r} "
                f"(configured: {sorted(cfg.lr_groups)})"
            )
        groups.append({"params": params, "lr": lr, "lr_max": lr, "name": name})
    if not groups:
        raise ValueError("nothing to optimize: every component is frozen")
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=0.0, momentum=cfg.momentum)
    return torch.optim.Adam(groups, lr=0.0)


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = optimizer.state_dict()
    tensors: dict[str, torch.Tensor] = {}
    meta: dict = {"param_groups": sd["param_groups"], "scalars": {}}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                tensors[f"state.{idx}.{key}"] = val
            else:
                meta["scalars"][f"{idx}.{key}"] = val
    return tensors, meta


def _restore_optimizer(
    optimizer: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], meta: dict
) -> None:
    state: dict[int, dict] = {}
    for name, tensor in tensors.items():
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = tensor
    for name, val in meta.get("scalars", {}).items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


# -- evaluation helpers ---------------------------------------------------------


def evaluate_loss(
    pipeline: TranslationPipeline,
    samples: Sequence[SignVideo],
    vocab: Vocabulary,
    batch_size: int,
    label_smoothing: float,
) -> float:
    """Position-weighted mean label-smoothed loss, inference mode."""
    was_training = pipeline.training
    pipeline.eval()
    total = 0.0
    weight = 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            tensors = batch_to_tensors(collate(chunk, vocab))
            loss = pipeline(
                tensors["videos"],
                tensors["video_lengths"],
                tensors["target_ids"],
                tensors["target_mask"],
                label_smoothing,
            )
            positions = int(tensors["target_mask"][:, 1:].sum())
            total += float(loss) * positions
            weight += positions
    pipeline.train(was_training)
    return total / max(weight, 1)


def evaluate_dev_bleu(
    pipeline: TranslationPipeline,
    samples: Sequence[SignVideo],
    vocab: Vocabulary,
    settings: EvalSettings,
) -> EvalReport:
    return evaluate_model(
        pipeline,
        samples,
        vocab,
        beam=settings.beam,
        max_len=settings.max_len,
        length_normalize=settings.length_normalize,
        split="dev",
        max_samples=settings.dev_max_samples,
    )


# -- the engine ----------------------------------------------------------------


class _MetricsLog:
    def __init__(self, path: Path, group_names: list[str]):
        self.path = path
        self.group_names = group_names
        if not path.exists():
            header = "step,split,loss,bleu4," + ",".join(
                f"lr_{g}" for g in group_names
            )
            path.write_text(header + "\n", encoding="utf-8")

    def row(
        self,
        step: int,
        split: str,
        loss: float,
        bleu4: float | None = None,
        lrs: dict[str, float] | None = None,
    ) -> None:
        lr_cells = [repr(lrs[g]) if lrs and g in lrs else "" for g in self.group_names]
        bleu_cell = "" if bleu4 is None else repr(bleu4)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{step},{split},{repr(loss)},{bleu_cell}," + ",".join(lr_cells) + "\n")


def _save_state(
    pipeline: TranslationPipeline,
    optimizer: torch.optim.Optimizer,
    path: Path,
    *,
    run_config_hash: str,
    model_config: dict,
    step: int,
    epoch: int,
    extra: dict,
) -> Path:
    groups = {
        name: module_tensors(module)
        for name, module in pipeline.component_modules().items()
    }
    opt_tensors, opt_meta = _optimizer_tensors(optimizer)
    groups["optimizer"] = opt_tensors
    groups["rng"] = {"torch": torch.get_rng_state()}
    return save_checkpoint(
        path,
        groups=groups,
        config_hash=run_config_hash,
        model_config=model_config,
        step=step,
        epoch=epoch,
        extra={**extra, "optimizer_meta": opt_meta},
    )


def train_pipeline(
    pipeline: TranslationPipeline,
    corpus: Corpus,
    vocab: Vocabulary,
    cfg: StageConfig,
    out_dir: str | Path,
    *,
    run_config_hash: str = "unhashed",
    eval_settings: EvalSettings | None = None,
    watch_selectors: dict[str, str] | None = None,
    resume_from: str | Path | None = None,
    force: bool = False,
    checkpoint_extra: dict | None = None,
) -> TrainResult:
    """Run the configured number of epochs over the train split.

    Divergence (a non-finite loss) aborts with a diagnostic dump next to the
    metrics log. A checkpoint lands in checkpoints/epoch-NNNN after every
    epoch; `best` tracks the highest dev BLEU-4 seen and `final` the last
    epoch. Resuming restarts from a checkpoint's epoch boundary and
    reproduces the uninterrupted run bit for bit under one seed.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = corpus.train
    if not samples:
        raise ValueError("train split is empty")
    model_config = pipeline_model_config(pipeline, vocab)
    optimizer = build_optimizer(pipeline, cfg)
    group_names = [g["name"] for g in optimizer.param_groups]
    trainable = [p for g in optimizer.param_groups for p in g["params"]]
    log = _MetricsLog(out_dir / "metrics.csv", group_names)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    t_max = steps_per_epoch * cfg.epochs
    extra = dict(checkpoint_extra or {})

    start_epoch = 0
    step = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected_config_hash=run_config_hash, force=force)
        for name, module in pipeline.component_modules().items():
            ck.load_group_into(name, module)
        _restore_optimizer(
            optimizer, ck.load_group("optimizer"), ck.extra["optimizer_meta"]
        )
        torch.set_rng_state(ck.load_group("rng")["torch"].to(torch.uint8))
        start_epoch = ck.epoch
        step = ck.step

    handle: WatchHandle | None = None
    if watch_selectors:
        handle = watch(pipeline, watch_selectors)

    epoch_losses: list[float] = []
    step_losses: list[float] = []
    dev_history: list[dict] = []
    best_bleu = -1.0
    ckpt_root = out_dir / "checkpoints"

    for epoch in range(start_epoch, cfg.epochs):
        pipeline.train()
        order = epoch_rng(cfg.seed, epoch).permutation(len(samples))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            tensors = batch_to_tensors(collate(chunk, vocab))
            lrs = {}
            for group in optimizer.param_groups:
                group["lr"] = cosine_lr(step, t_max, group["lr_max"], cfg.lr_min)
                lrs[group["name"]] = group["lr"]
            loss = pipeline(
                tensors["videos"],
                tensors["video_lengths"],
                tensors["target_ids"],
                tensors["target_mask"],
                cfg.label_smoothing,
            )
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                dump = {
                    "step": step,
                    "epoch": epoch,
                    "loss": loss_value,
                    "recent_losses": step_losses[-20:],
                    "lr": lrs,
                }
                (out_dir / "divergence.json").write_text(
                    json.dumps(dump, indent=1), encoding="utf-8"
                )
                raise DivergenceError(
                    f"non-finite loss at step {step}; diagnostics in "
                    f"{out_dir / 'divergence.json'}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if handle is not None:
                handle.record(step)  # pre-clipping, raw gradient magnitudes
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            optimizer.step()
            log.row(step, "train", loss_value, lrs=lrs)
            running += loss_value
            step_losses.append(loss_value)
            step += 1
        epoch_losses.append(running / steps_per_epoch)

        if corpus.dev:
            dev_loss = evaluate_loss(
                pipeline, corpus.dev, vocab, cfg.batch_size, cfg.label_smoothing
            )
            entry = {"epoch": epoch, "dev_loss": dev_loss}
            bleu4 = None
            if (
                eval_settings is not None
                and cfg.eval_every > 0
                and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs)
            ):
                report = evaluate_dev_bleu(pipeline, corpus.dev, vocab, eval_settings)
                bleu4 = report.bleu[4]
                entry["dev_bleu4"] = bleu4
            log.row(step, "dev", dev_loss, bleu4=bleu4)
            dev_history.append(entry)
            if bleu4 is not None and bleu4 > best_bleu:
                best_bleu = bleu4
                _save_state(
                    pipeline, optimizer, out_dir / "best",
                    run_config_hash=run_config_hash, model_config=model_config,
                    step=step, epoch=epoch + 1,
                    extra={**extra, "dev_bleu4": bleu4},
                )

        _save_state(
            pipeline, optimizer, ckpt_root / f"epoch-{epoch + 1:04d}",
            run_config_hash=run_config_hash, model_config=model_config,
            step=step, epoch=epoch + 1, extra=extra,
        )

    final = _save_state(
        pipeline, optimizer, out_dir / "final",
        run_config_hash=run_config_hash, model_config=model_config,
        step=step, epoch=cfg.epochs, extra=extra,
    )
    best = out_dir / "best" if best_bleu >= 0 else final
    trace = handle.trace if handle is not None else None
    if trace is not None:
        export_trace(trace, out_dir / "trace.csv")
    return TrainResult(
        out_dir=out_dir,
        final_checkpoint=final,
        best_checkpoint=best,
        epoch_losses=epoch_losses,
        step_losses=step_losses,
        dev_history=dev_history,
        trace=trace,
    )


# -- stage runners ---------------------------------------------------------------


def run_stage1(
    corpus: Corpus,
    vocab: Vocabulary,
    visual_cfg: VisualEncoderConfig,
    light_t_cfg: LightTConfig,
    cfg: StageConfig,
    out_dir: str | Path,
    *,
    run_config_hash: str = "unhashed",
    eval_settings: EvalSettings | None = None,
    resume_from: str | Path | None = None,
    force: bool = False,
) -> TrainResult:
    """Visual initialing: joint training of the visual encoder, the textual
    adapter, and the lightweight translation head."""
    seed_all(cfg.seed)
    pipeline = build_stage1_pipeline(visual_cfg, light_t_cfg)
    return train_pipeline(
        pipeline, corpus, vocab, cfg, out_dir,
        run_config_hash=run_config_hash,
        eval_settings=eval_settings,
        resume_from=resume_from,
        force=force,
    )


def run_stage2(
    corpus: Corpus,
    vocab: Vocabulary,
    stage1_checkpoint_path: str | Path,
    backend: TinySeq2SeqBackend,
    cfg: StageConfig,
    out_dir: str | Path,
    *,
    tap: str = "sign_wise",
    freeze: FreezePolicy = FreezePolicy(),
    run_config_hash: str = "unhashed",
    eval_settings: EvalSettings | None = None,
) -> TrainResult:
    """Backend fine-tuning over the (by default frozen) stage-1 visual encoder."""
    ck = load_checkpoint(stage1_checkpoint_path)
    seed_all(cfg.seed)
    pipeline = build_stage2_pipeline(ck, backend, tap=tap, freeze=freeze)
    extra = {"stage1_checkpoint": str(stage1_checkpoint_path), "freeze": freeze.to_dict()}
    if tap == "hidden_states":
        extra["stage1_core"] = ck.model_config["core"]["config"]
    return train_pipeline(
        pipeline, corpus, vocab, cfg, out_dir,
        run_config_hash=run_config_hash,
        eval_settings=eval_settings,
        checkpoint_extra=extra,
    )


def run_joint_e2e(
    corpus: Corpus,
    vocab: Vocabulary,
    visual_cfg: VisualEncoderConfig,
    core: torch.nn.Module,
    cfg: StageConfig,
    out_dir: str | Path,
    *,
    tap: str = "sign_wise",
    run_config_hash: str = "unhashed",
    eval_settings: EvalSettings | None = None,
    watch_layers: bool = True,
) -> TrainResult:
    """Joint end-to-end baseline with gradient-norm diagnostics attached."""
    seed_all(cfg.seed)
    pipeline = build_e2e_pipeline(visual_cfg, core, tap=tap)
    selectors = None
    if watch_layers:
        last_block = len(pipeline.core.decoder.blocks) - 1
        selectors = {
            ENCODER_LAYER: "visual_encoder.temporal.conv",
            BACKEND_LAYER: f"core.decoder.blocks.{last_block}",
        }
    return train_pipeline(
        pipeline, corpus, vocab, cfg, out_dir,
        run_config_hash=run_config_hash,
        eval_settings=eval_settings,
        watch_selectors=selectors,
    )


def matched_e2e_epochs(
    n_train: int, stage1_cfg: StageConfig, stage2_cfg: StageConfig, e2e_batch: int
) -> int:
    """Epochs giving the joint baseline the two stages' total step budget."""
    s1 = math.ceil(n_train / stage1_cfg.batch_size) * stage1_cfg.epochs
    s2 = math.ceil(n_train / stage2_cfg.batch_size) * stage2_cfg.epochs
    return max(1, math.ceil((s1 + s2) / math.ceil(n_train / e2e_batch)))
