"""Experiment configuration: one JSON file with per-command sections, with
command-line flags taking precedence over file values over defaults. Every
run output embeds the hash of the resolved configuration so that checkpoints
and evaluations can refuse to mix configurations silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

from .corpus import (
    Corpus,
    SyntheticSpec,
    SpecValidationError,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    load_corpus,
    trim_vocabulary,
)
from .checkpoint import load_checkpoint, module_tensors, save_checkpoint
from .llm_stage import (
    FreezePolicy,
    TinyBackendConfig,
    TinySeq2SeqBackend,
    pretrain_tiny_backend,
    sample_monolingual_sentences,
)
from .light_t import LIGHT_T_PRESETS, LightTConfig, build_light_t
from .trainer import (
    EvalSettings,
    StageConfig,
    default_e2e_config,
    default_stage1_config,
    default_stage2_config,
)
from .utils import config_hash
from .visual_encoder import VisualEncoderConfig

ABLATION_AXES = (
    "downsample_rate",
    "light_t_scale",
    "feature_tap",
    "freeze_policy",
    "backend_pretraining",
    "init_epochs",
)


class ConfigError(ValueError):
    """Configuration problem, reported with the offending field path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"config field {field_path!r}: {message}")
        self.field_path = field_path


@dataclass(frozen=True)
class BackendSettings:
    layers: int = 4
    heads: int = 4
    hidden: int = 256
    ffn: int = 1024
    max_positions: int = 128
    dropout: float = 0.1
    pretrained: bool = True
    pretrain_steps: int = 1500
    pretrain_sentences: int = 4000
    pretrain_batch_size: int = 32
    pretrain_lr: float = 1e-3
    pretrain_seed: int = 0
    checkpoint: str | None = None

    def tiny_config(self, vocab_size: int) -> TinyBackendConfig:
        return TinyBackendConfig(
            layers=self.layers,
            heads=self.heads,
            hidden=self.hidden,
            ffn=self.ffn,
            vocab_size=vocab_size,
            max_positions=self.max_positions,
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "hidden": self.hidden,
            "ffn": self.ffn,
            "max_positions": self.max_positions,
            "dropout": self.dropout,
            "pretrained": self.pretrained,
            "pretrain_steps": self.pretrain_steps,
            "pretrain_sentences": self.pretrain_sentences,
            "pretrain_batch_size": self.pretrain_batch_size,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_seed": self.pretrain_seed,
            "checkpoint": self.checkpoint,
        }


@dataclass
class ExperimentConfig:
    seed: int
    out: Path
    corpus_synthetic: SyntheticSpec | None
    corpus_path: Path | None
    visual: VisualEncoderConfig
    light_t_preset: str
    light_t_max_positions: int
    light_t_dropout: float
    backend: BackendSettings
    tap: str
    freeze: FreezePolicy
    stage1: StageConfig
    stage2: StageConfig
    e2e_epochs: int | None  # None selects the matched-budget rule
    e2e_batch_size: int
    eval: EvalSettings
    ablate_axis: str | None
    ablate_values: list
    resolved: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)

    def light_t_config(self, vocab_size: int) -> LightTConfig:
        return build_light_t(
            self.light_t_preset,
            vocab_size,
            max_positions=self.light_t_max_positions,
            dropout=self.light_t_dropout,
        )


def _check(condition: bool, field_path: str, message: str) -> None:
    if not condition:
        raise ConfigError(field_path, message)


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    _check(isinstance(value, dict), name, f"must be an object, got {type(value).__name__}")
    return value


def _stage_config(raw: dict, name: str, default: StageConfig, seed: int) -> StageConfig:
    section = _section(raw, name)
    merged = default.to_dict()
    for key, value in section.items():
        if key in ("matched", "batch_size") and name == "e2e":
            continue
        _check(key in merged, f"{name}.{key}", "unknown StageConfig field")
        merged[key] = value
    merged["seed"] = seed
    try:
        return StageConfig.from_dict(merged)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from exc


def load_experiment_config(
    path: str | Path,
    *,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"no such file: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    _check(isinstance(raw, dict), "config", "top level must be a JSON object")

    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    out = Path(out_override if out_override is not None else raw.get("out", "runs/out"))

    corpus_section = _section(raw, "corpus")
    corpus_synthetic = None
    corpus_path = None
    if "path" in corpus_section:
        corpus_path = Path(corpus_section["path"])
    elif "synthetic" in corpus_section:
        try:
            corpus_synthetic = SyntheticSpec.from_dict(corpus_section["synthetic"])
        except SpecValidationError as exc:
            raise ConfigError(f"corpus.synthetic.{exc.field_name}", str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError("corpus.synthetic", str(exc)) from exc
    else:
        raise ConfigError("corpus", "needs either a 'synthetic' spec or a 'path'")

    try:
        visual = VisualEncoderConfig.from_dict(_section(raw, "visual"))
    except ValueError as exc:
        raise ConfigError("visual", str(exc)) from exc

    lt_section = _section(raw, "light_t")
    preset = lt_section.get("preset", "tiny")
    _check(
        preset in LIGHT_T_PRESETS,
        "light_t.preset",
        f"unknown preset {preset!r}, expected one of {sorted(LIGHT_T_PRESETS)}",
    )
    lt_max_positions = int(lt_section.get("max_positions", 256))
    lt_dropout = float(lt_section.get("dropout", 0.1))
    _check(0 <= lt_dropout < 1, "light_t.dropout", "must lie in [0, 1)")

    backend_section = _section(raw, "backend")
    try:
        backend = BackendSettings(**backend_section)
    except TypeError as exc:
        raise ConfigError("backend", str(exc)) from exc
    _check(backend.layers >= 1, "backend.layers", "must be >= 1")
    _check(
        backend.hidden % backend.heads == 0,
        "backend.hidden",
        "must be divisible by backend.heads",
    )

    tap = raw.get("tap", "sign_wise")
    _check(
        tap in ("frame_wise", "sign_wise", "hidden_states"),
        "tap",
        f"unknown tap {tap!r}",
    )
    try:
        freeze = FreezePolicy.from_dict(_section(raw, "freeze"))
    except (TypeError, ValueError) as exc:
        raise ConfigError("freeze", str(exc)) from exc

    stage1 = _stage_config(raw, "stage1", default_stage1_config(), seed)
    stage2 = _stage_config(raw, "stage2", default_stage2_config(), seed)
    e2e_section = _section(raw, "e2e")
    e2e_batch = int(e2e_section.get("batch_size", 8))
    e2e_epochs = None
    if not e2e_section.get("matched", "epochs" not in e2e_section):
        base = default_e2e_config(epochs=int(e2e_section.get("epochs", 1)))
        stage = _stage_config(raw, "e2e", base, seed)
        e2e_epochs = stage.epochs
    # e2e hyperparameters besides epochs/batch follow the defaults unless given
    _check(e2e_batch >= 1, "e2e.batch_size", "must be >= 1")

    eval_section = _section(raw, "eval")
    try:
        merged_eval = EvalSettings().to_dict()
        for key, value in eval_section.items():
            _check(key in merged_eval, f"eval.{key}", "unknown eval field")
            merged_eval[key] = value
        eval_settings = EvalSettings.from_dict(merged_eval)
    except TypeError as exc:
        raise ConfigError("eval", str(exc)) from exc
    _check(eval_settings.beam >= 1, "eval.beam", "must be >= 1")
    _check(eval_settings.max_len >= 2, "eval.max_len", "must be >= 2")

    ablate_section = _section(raw, "ablate")
    ablate_axis = ablate_section.get("axis")
    ablate_values = list(ablate_section.get("values", []))
    if ablate_axis is not None:
        _check(
            ablate_axis in ABLATION_AXES,
            "ablate.axis",
            f"unknown axis {ablate_axis!r}, valid axes: {', '.join(ABLATION_AXES)}",
        )

    resolved = {
        "seed": seed,
        "corpus": {
            "synthetic": corpus_synthetic.to_dict() if corpus_synthetic else None,
            "path": str(corpus_path) if corpus_path else None,
        },
        "visual": visual.to_dict(),
        "light_t": {
            "preset": preset,
            "max_positions": lt_max_positions,
            "dropout": lt_dropout,
        },
        "backend": backend.to_dict(),
        "tap": tap,
        "freeze": freeze.to_dict(),
        "stage1": stage1.to_dict(),
        "stage2": stage2.to_dict(),
        "e2e": {"epochs": e2e_epochs, "batch_size": e2e_batch},
        "eval": eval_settings.to_dict(),
        "ablate": {"axis": ablate_axis, "values": ablate_values},
    }
    return ExperimentConfig(
        seed=seed,
        out=out,
        corpus_synthetic=corpus_synthetic,
        corpus_path=corpus_path,
        visual=visual,
        light_t_preset=preset,
        light_t_max_positions=lt_max_positions,
        light_t_dropout=lt_dropout,
        backend=backend,
        tap=tap,
        freeze=freeze,
        stage1=stage1,
        stage2=stage2,
        e2e_epochs=e2e_epochs,
        e2e_batch_size=e2e_batch,
        eval=eval_settings,
        ablate_axis=ablate_axis,
        ablate_values=ablate_values,
        resolved=resolved,
    )


def materialize_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.corpus_path is not None:
        return load_corpus(cfg.corpus_path)
    return generate_synthetic_corpus(cfg.corpus_synthetic)


def corpus_vocabulary(corpus: Corpus) -> Vocabulary:
    """Vocabulary trimmed to the train split, the one every model sees."""
    base = build_vocabulary(
        tok for sample in corpus.train for tok in sample.transcript.split()
    )
    return trim_vocabulary(base, corpus)


def save_backend(backend: TinySeq2SeqBackend, path: Path, cfg_hash: str) -> Path:
    return save_checkpoint(
        path,
        groups={"backend": module_tensors(backend)},
        config_hash=cfg_hash,
        model_config={
            "backend": backend.config.to_dict(),
            "vocab_tokens": list(backend.vocab.tokens) if backend.vocab else None,
        },
        step=0,
        epoch=0,
    )


def load_backend(path: str | Path, vocab: Vocabulary) -> TinySeq2SeqBackend:
    ck = load_checkpoint(path)
    backend_cfg = TinyBackendConfig.from_dict(ck.model_config["backend"])
    backend = TinySeq2SeqBackend(backend_cfg, vocab=vocab)
    ck.load_group_into("backend", backend)
    backend.eval()
    return backend


def prepare_backend(
    cfg: ExperimentConfig,
    vocab: Vocabulary,
    cache_dir: Path | None = None,
    pretrained: bool | None = None,
) -> TinySeq2SeqBackend:
    """Build the stage-2 backend: load a checkpoint when configured, reuse a
    cached pretraining run when its configuration matches, else pretrain (or
    return the seeded random initialization when pretraining is disabled)."""
    import torch

    settings = cfg.backend
    if settings.checkpoint:
        return load_backend(settings.checkpoint, vocab)
    use_pretraining = settings.pretrained if pretrained is None else pretrained
    backend_cfg = settings.tiny_config(vocab.size)
    if not use_pretraining:
        torch.manual_seed(settings.pretrain_seed)
        backend = TinySeq2SeqBackend(backend_cfg, vocab=vocab)
        backend.eval()
        return backend
    cache_key = config_hash(
        {
            "backend": settings.to_dict(),
            "vocab": list(vocab.tokens),
            "pretrained": True,
        }
    )
    if cache_dir is not None:
        cached = cache_dir / cache_key[:16]
        if (cached / "manifest.json").is_file():
            return load_backend(cached, vocab)
    length_range = (3, 8)
    transitions = None
    if cfg.corpus_synthetic is not None:
        from .corpus import glyph_name_transitions

        length_range = cfg.corpus_synthetic.sentence_length_range
        table = glyph_name_transitions(
            cfg.corpus_synthetic.seed, cfg.corpus_synthetic.glyph_vocab_size
        )
        # restrict to tokens that survived vocabulary trimming
        transitions = {
            tok: [s for s in successors if s in vocab] or [tok]
            for tok, successors in table.items()
            if tok in vocab
        }
    sentences = sample_monolingual_sentences(
        vocab, settings.pretrain_sentences, length_range, settings.pretrain_seed,
        transitions=transitions,
    )
    backend, _ = pretrain_tiny_backend(
        sentences,
        vocab,
        config=backend_cfg,
        steps=settings.pretrain_steps,
        batch_size=settings.pretrain_batch_size,
        lr=settings.pretrain_lr,
        seed=settings.pretrain_seed,
    )
    if cache_dir is not None:
        save_backend(backend, cache_dir / cache_key[:16], cache_key)
    return backend
