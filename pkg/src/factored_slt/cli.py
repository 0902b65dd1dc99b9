"""Command-line surface.

Commands: gen-data, stage1, stage2, e2e, eval, diagnose, ablate. All read a
single JSON experiment config; --seed/--out override the file. Exit codes:
0 success, 2 configuration error, 3 training divergence, 4 I/O error. The
FLA_SLT_THREADS environment variable caps torch worker threads, with 0
selecting strict single-threaded mode for bitwise reproducibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .corpus import CorpusIOError, save_corpus, save_vocabulary
from .diagnostics import dominance_report, load_trace, plot_trace
from .evalkit import evaluate_model, write_report
from .experiment import (
    ABLATION_AXES,
    ConfigError,
    ExperimentConfig,
    corpus_vocabulary,
    load_experiment_config,
    materialize_corpus,
    prepare_backend,
)
from .llm_stage import FreezePolicy
from .trainer import (
    DivergenceError,
    StageConfig,
    default_e2e_config,
    load_pipeline,
    matched_e2e_epochs,
    run_joint_e2e,
    run_stage1,
    run_stage2,
)
from .utils import configure_threads, sha256_hex, threads_from_env


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("config", "pass --config PATH")
    return load_experiment_config(
        args.config, seed_override=args.seed, out_override=args.out
    )


def _prepare_data(cfg: ExperimentConfig):
    corpus = materialize_corpus(cfg)
    vocab = corpus_vocabulary(corpus)
    return corpus, vocab


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if cfg.corpus_synthetic is None:
        raise ConfigError("corpus.synthetic", "gen-data needs a synthetic corpus spec")
    corpus = materialize_corpus(cfg)
    vocab = corpus_vocabulary(corpus)
    out = cfg.out / "corpus"
    save_corpus(corpus, out)
    save_vocabulary(vocab, out / "vocab.txt")
    print(
        f"wrote {sum(len(corpus.split(s)) for s in ('train', 'dev', 'test'))} "
        f"samples to {out} (vocab size {vocab.size})"
    )
    return 0


def cmd_stage1(args) -> int:
    cfg = _load_config(args)
    corpus, vocab = _prepare_data(cfg)
    result = run_stage1(
        corpus,
        vocab,
        cfg.visual,
        cfg.light_t_config(vocab.size),
        cfg.stage1,
        cfg.out / "stage1",
        run_config_hash=cfg.hash,
        eval_settings=cfg.eval,
        resume_from=args.resume,
        force=args.force,
    )
    print(f"stage1 done: final checkpoint {result.final_checkpoint}")
    return 0


def _stage1_checkpoint_path(cfg: ExperimentConfig, args) -> Path:
    if getattr(args, "stage1_checkpoint", None):
        return Path(args.stage1_checkpoint)
    return cfg.out / "stage1" / "final"


def cmd_stage2(args) -> int:
    cfg = _load_config(args)
    corpus, vocab = _prepare_data(cfg)
    backend = prepare_backend(cfg, vocab, cache_dir=cfg.out / "backend_cache")
    result = run_stage2(
        corpus,
        vocab,
        _stage1_checkpoint_path(cfg, args),
        backend,
        cfg.stage2,
        cfg.out / "stage2",
        tap=cfg.tap,
        freeze=cfg.freeze,
        run_config_hash=cfg.hash,
        eval_settings=cfg.eval,
    )
    print(f"stage2 done: final checkpoint {result.final_checkpoint}")
    return 0


def cmd_e2e(args) -> int:
    cfg = _load_config(args)
    corpus, vocab = _prepare_data(cfg)
    backend = prepare_backend(cfg, vocab, cache_dir=cfg.out / "backend_cache")
    epochs = cfg.e2e_epochs
    if epochs is None:
        epochs = matched_e2e_epochs(
            len(corpus.train), cfg.stage1, cfg.stage2, cfg.e2e_batch_size
        )
    stage = StageConfig.from_dict(
        {
            **default_e2e_config(epochs=epochs, seed=cfg.seed).to_dict(),
            "batch_size": cfg.e2e_batch_size,
        }
    )
    result = run_joint_e2e(
        corpus,
        vocab,
        cfg.visual,
        backend,
        stage,
        cfg.out / "e2e",
        tap=cfg.tap,
        run_config_hash=cfg.hash,
        eval_settings=cfg.eval,
    )
    print(
        f"e2e done: final checkpoint {result.final_checkpoint}; "
        f"trace at {result.out_dir / 'trace.csv'}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.checkpoint is None:
        raise ConfigError("checkpoint", "pass --checkpoint PATH")
    ck = load_checkpoint(
        args.checkpoint, expected_config_hash=cfg.hash, force=args.force
    )
    pipeline, vocab = load_pipeline(ck)
    corpus, _ = _prepare_data(cfg)
    samples = corpus.split(args.split)
    checkpoint_hash = sha256_hex((Path(args.checkpoint) / "manifest.json").read_bytes())
    report = evaluate_model(
        pipeline,
        samples,
        vocab,
        beam=cfg.eval.beam,
        max_len=cfg.eval.max_len,
        length_normalize=cfg.eval.length_normalize,
        split=args.split,
        checkpoint_hash=checkpoint_hash,
    )
    out = cfg.out / f"eval-{args.split}"
    path = write_report(report, out)
    print(
        f"eval {args.split}: bleu4={report.bleu[4]:.4f} rouge_l={report.rouge_l:.4f} "
        f"-> {path}"
    )
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    trace_path = Path(args.trace) if args.trace else cfg.out / "e2e" / "trace.csv"
    if not trace_path.is_file():
        raise CorpusIOError(f"no trace file at {trace_path}")
    trace = load_trace(trace_path)
    report = dominance_report(trace, args.encoder_layer, args.backend_layer)
    out = cfg.out / "diagnose"
    out.mkdir(parents=True, exist_ok=True)
    (out / "dominance.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    plot_trace(trace, out / "dominance.png", smooth=args.smooth)
    print(
        f"dominance: backend grad norm larger on "
        f"{report.fraction_backend_exceeds:.1%} of {report.steps} steps "
        f"-> {out / 'dominance.json'}"
    )
    return 0


# -- ablation -----------------------------------------------------------------


def _slug(value) -> str:
    text = json.dumps(value) if isinstance(value, (dict, list)) else str(value)
    return "".join(ch if ch.isalnum() or ch in ".-" else "_" for ch in text)[:48]


def _eval_split(pipeline, samples, vocab, cfg: ExperimentConfig, split: str):
    cap = cfg.eval.dev_max_samples if split == "dev" else None
    return evaluate_model(
        pipeline,
        samples,
        vocab,
        beam=cfg.eval.beam,
        max_len=cfg.eval.max_len,
        length_normalize=cfg.eval.length_normalize,
        split=split,
        max_samples=cap,
    )


def _run_factorized(
    cfg: ExperimentConfig,
    corpus,
    vocab,
    out: Path,
    *,
    stage1_cfg: StageConfig | None = None,
    stage1_dir: Path | None = None,
    tap: str | None = None,
    freeze: FreezePolicy | None = None,
    pretrained: bool | None = None,
):
    """Stage 1 (unless a finished one is supplied) plus stage 2; returns the
    stage-2 pipeline evaluated on dev and test."""
    stage1_cfg = stage1_cfg or cfg.stage1
    if stage1_dir is None:
        stage1_dir = out / "stage1"
        run_stage1(
            corpus, vocab, cfg.visual, cfg.light_t_config(vocab.size),
            stage1_cfg, stage1_dir,
            run_config_hash=cfg.hash, eval_settings=None,
        )
    backend = prepare_backend(
        cfg, vocab, cache_dir=cfg.out / "backend_cache", pretrained=pretrained
    )
    run_stage2(
        corpus, vocab, stage1_dir / "final", backend, cfg.stage2, out / "stage2",
        tap=tap or cfg.tap, freeze=freeze or cfg.freeze,
        run_config_hash=cfg.hash, eval_settings=None,
    )
    pipeline, _ = load_pipeline(load_checkpoint(out / "stage2" / "final"))
    dev = _eval_split(pipeline, corpus.dev, vocab, cfg, "dev")
    test = _eval_split(pipeline, corpus.test, vocab, cfg, "test")
    return dev, test


def _freeze_from_value(value) -> FreezePolicy:
    if isinstance(value, dict):
        return FreezePolicy.from_dict(value)
    mapping = {
        "none": FreezePolicy(False, False),
        "backbone": FreezePolicy(True, False),
        "both": FreezePolicy(True, True),
    }
    if value not in mapping:
        raise ConfigError(
            "ablate.values", f"freeze_policy value must be one of {sorted(mapping)}"
        )
    return mapping[value]


def run_ablation_setting(
    cfg: ExperimentConfig, corpus, vocab, axis: str, value, out: Path
) -> dict:
    started = time.perf_counter()
    if axis == "downsample_rate":
        visual = dataclasses.replace(cfg.visual, downsample_rate=float(value))
        sub = dataclasses.replace(cfg, visual=visual)
        dev, test = _run_factorized(sub, corpus, vocab, out)
    elif axis == "light_t_scale":
        sub = dataclasses.replace(cfg, light_t_preset=str(value))
        dev, test = _run_factorized(sub, corpus, vocab, out)
    elif axis == "feature_tap":
        dev, test = _run_factorized(
            cfg, corpus, vocab, out,
            stage1_dir=out.parent / "stage1_shared", tap=str(value),
        )
    elif axis == "freeze_policy":
        dev, test = _run_factorized(
            cfg, corpus, vocab, out,
            stage1_dir=out.parent / "stage1_shared",
            freeze=_freeze_from_value(value),
        )
    elif axis == "backend_pretraining":
        if value not in ("pretrained", "random"):
            raise ConfigError(
                "ablate.values", "backend_pretraining values are 'pretrained'/'random'"
            )
        dev, test = _run_factorized(
            cfg, corpus, vocab, out,
            stage1_dir=out.parent / "stage1_shared",
            pretrained=value == "pretrained",
        )
    elif axis == "init_epochs":
        stage1_cfg = StageConfig.from_dict(
            {**cfg.stage1.to_dict(), "epochs": int(value)}
        )
        dev, test = _run_factorized(cfg, corpus, vocab, out, stage1_cfg=stage1_cfg)
    else:
        raise ConfigError(
            "ablate.axis", f"unknown axis {axis!r}, valid axes: {', '.join(ABLATION_AXES)}"
        )
    row = {"value": value, "wall_time_s": round(time.perf_counter() - started, 3)}
    for split, report in (("dev", dev), ("test", test)):
        for n in range(1, 5):
            row[f"{split}_bleu{n}"] = report.bleu[n]
        row[f"{split}_rouge_l"] = report.rouge_l
    return row


_ABLATE_COLUMNS = (
    ["value"]
    + [f"dev_bleu{n}" for n in range(1, 5)]
    + ["dev_rouge_l"]
    + [f"test_bleu{n}" for n in range(1, 5)]
    + ["test_rouge_l", "wall_time_s"]
)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    axis = args.axis or cfg.ablate_axis
    if axis is None:
        raise ConfigError("ablate.axis", "pass --axis or set it in the config")
    if axis not in ABLATION_AXES:
        raise ConfigError(
            "ablate.axis", f"unknown axis {axis!r}, valid axes: {', '.join(ABLATION_AXES)}"
        )
    values = cfg.ablate_values
    if not values:
        raise ConfigError("ablate.values", f"no values configured for axis {axis!r}")
    corpus, vocab = _prepare_data(cfg)
    out_root = cfg.out / "ablate" / axis
    out_root.mkdir(parents=True, exist_ok=True)

    shares_stage1 = axis in ("feature_tap", "freeze_policy", "backend_pretraining")
    if shares_stage1 and not (out_root / "stage1_shared" / "final" / "manifest.json").is_file():
        run_stage1(
            corpus, vocab, cfg.visual, cfg.light_t_config(vocab.size),
            cfg.stage1, out_root / "stage1_shared",
            run_config_hash=cfg.hash, eval_settings=None,
        )

    rows = []
    if args.parallel and len(values) > 1:
        import multiprocessing
        from concurrent.futures import ProcessPoolExecutor

        jobs = [
            (args.config, args.seed, args.out, axis, i) for i in range(len(values))
        ]
        # spawn: forking after torch has initialized its thread pool deadlocks
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.parallel, mp_context=context) as pool:
            rows = list(pool.map(_ablation_worker, jobs))
    else:
        for value in values:
            rows.append(
                run_ablation_setting(
                    cfg, corpus, vocab, axis, value, out_root / _slug(value)
                )
            )
    summary = out_root / "summary.csv"
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write(",".join(_ABLATE_COLUMNS) + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    json.dumps(row[c]) if c == "value" else repr(row[c])
                    for c in _ABLATE_COLUMNS
                )
                + "\n"
            )
    print(f"ablation over {axis}: {len(rows)} settings -> {summary}")
    return 0


def _ablation_worker(job) -> dict:
    config_path, seed, out, axis, index = job
    cfg = load_experiment_config(config_path, seed_override=seed, out_override=out)
    corpus = materialize_corpus(cfg)
    vocab = corpus_vocabulary(corpus)
    value = cfg.ablate_values[index]
    out_root = cfg.out / "ablate" / axis
    return run_ablation_setting(cfg, corpus, vocab, axis, value, out_root / _slug(value))


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factored-slt",
        description="Two-stage gloss-free sign-language translation at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=str, default=None, help="override output directory")
        p.add_argument("--force", action="store_true", help="bypass config-hash checks")

    common(sub.add_parser("gen-data", help="generate and save the synthetic corpus"))
    p = sub.add_parser("stage1", help="run the visual initialing stage")
    common(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p = sub.add_parser("stage2", help="run backend fine-tuning from a stage-1 checkpoint")
    common(p)
    p.add_argument("--stage1-checkpoint", type=str, default=None)
    common(sub.add_parser("e2e", help="run the joint end-to-end baseline"))
    p = sub.add_parser("eval", help="beam-decode a split and write metrics")
    common(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--split", type=str, default="test", choices=("train", "dev", "test"))
    p = sub.add_parser("diagnose", help="dominance report and plot from a norm trace")
    common(p)
    p.add_argument("--trace", type=str, default=None)
    p.add_argument("--smooth", type=float, default=None)
    p.add_argument("--encoder-layer", type=str, default="encoder_last")
    p.add_argument("--backend-layer", type=str, default="backend_last")
    p = sub.add_parser("ablate", help="sweep one ablation axis and tabulate metrics")
    common(p)
    p.add_argument("--axis", type=str, default=None)
    p.add_argument("--parallel", type=int, default=0, help="settings run in N processes")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "e2e": cmd_e2e,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_threads(threads_from_env())
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except (CorpusIOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
