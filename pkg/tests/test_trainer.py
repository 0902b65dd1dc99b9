import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from factored_slt.checkpoint import (
    CheckpointError,
    group_checksum,
    load_checkpoint,
    module_tensors,
    read_blob,
    save_checkpoint,
    write_blob,
)
from factored_slt.light_t import LightTConfig
from factored_slt.llm_stage import TinyBackendConfig, TinySeq2SeqBackend
from factored_slt.trainer import (
    DivergenceError,
    StageConfig,
    build_stage2_pipeline,
    cosine_lr,
    load_pipeline,
    matched_e2e_epochs,
    run_joint_e2e,
    run_stage1,
    run_stage2,
)
from factored_slt.light_t import LightT
from tests.conftest import MICRO_VISUAL
from tests.oracles import adam_reference, sgd_momentum_reference


def _lt_cfg(vocab_size, hidden=16, layers=1, heads=2, ffn=32, dropout=0.1):
    return LightTConfig(
        layers=layers, heads=heads, hidden=hidden, ffn=ffn,
        vocab_size=vocab_size, max_positions=64, dropout=dropout,
    )


def _stage1_cfg(**overrides):
    base = dict(
        optimizer="sgd",
        momentum=0.9,
        lr_groups={"visual_encoder": 1e-2, "adapter": 1e-2, "light_t": 1e-2},
        batch_size=8,
        epochs=1,
        seed=11,
        eval_every=0,
    )
    base.update(overrides)
    return StageConfig(**base)


# -- cosine schedule -----------------------------------------------------------


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-2, 1e-4) == pytest.approx(1e-2, abs=1e-15)
    assert cosine_lr(100, 100, 1e-2, 1e-4) == pytest.approx(1e-4, abs=1e-15)
    assert cosine_lr(50, 100, 1e-2, 1e-4) == pytest.approx((1e-2 + 1e-4) / 2, abs=1e-12)


def test_cosine_clamps_past_t_max():
    assert cosine_lr(150, 100, 1e-2, 1e-4) == 1e-4


@given(t_max=st.integers(min_value=1, max_value=200), seed=st.integers(0, 100))
def test_cosine_monotone_nonincreasing(t_max, seed):
    values = [cosine_lr(s, t_max, 3e-3, 1e-5) for s in range(t_max + 1)]
    assert all(a >= b - 1e-18 for a, b in zip(values, values[1:]))


# -- optimizer single-step oracles ------------------------------------------------


def _quadratic_grad(a, b):
    def grad(p):
        return np.array([a * p[0], b * p[1]], dtype=np.float64)

    return grad


def test_sgd_momentum_matches_closed_form():
    a, b = 3.0, 0.5
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    optimizer = torch.optim.SGD([p], lr=0.1, momentum=0.9)
    for _ in range(3):
        loss = 0.5 * (a * p[0] ** 2 + b * p[1] ** 2)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    expected = sgd_momentum_reference(
        [1.0, -2.0], _quadratic_grad(a, b), lr=0.1, momentum=0.9, steps=3
    )
    assert np.allclose(p.detach().numpy(), expected, atol=1e-9, rtol=0)


def test_adam_matches_closed_form():
    a, b = 2.0, 5.0
    p = torch.nn.Parameter(torch.tensor([0.7, -1.3], dtype=torch.float64))
    optimizer = torch.optim.Adam([p], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(2):
        loss = 0.5 * (a * p[0] ** 2 + b * p[1] ** 2)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    expected = adam_reference(
        [0.7, -1.3], _quadratic_grad(a, b), lr=1e-2, betas=(0.9, 0.999),
        eps=1e-8, steps=2,
    )
    assert np.allclose(p.detach().numpy(), expected, atol=1e-9, rtol=0)


# -- checkpoint format --------------------------------------------------------------


def _toy_groups():
    torch.manual_seed(0)
    return {
        "weights": {
            "a": torch.randn(3, 4),
            "b": torch.arange(5, dtype=torch.int64),
            "c": torch.tensor(2.5, dtype=torch.float64),
        },
        "rng": {"torch": torch.get_rng_state()},
    }


def test_blob_roundtrip(tmp_path):
    tensors = _toy_groups()["weights"]
    write_blob(tmp_path / "g.bin", tensors)
    back = read_blob(tmp_path / "g.bin")
    assert set(back) == set(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
        assert back[k].dtype == tensors[k].dtype


def test_save_load_save_is_byte_identical(tmp_path):
    groups = _toy_groups()
    save_checkpoint(
        tmp_path / "a", groups=groups, config_hash="h", model_config={"x": 1},
        step=3, epoch=1,
    )
    ck = load_checkpoint(tmp_path / "a")
    reloaded = {name: ck.load_group(name) for name in ck.group_names()}
    save_checkpoint(
        tmp_path / "b", groups=reloaded, config_hash="h", model_config={"x": 1},
        step=3, epoch=1,
    )
    for file_a in sorted((tmp_path / "a").iterdir()):
        assert file_a.read_bytes() == (tmp_path / "b" / file_a.name).read_bytes()


def test_tampered_manifest_rejected(tmp_path):
    save_checkpoint(
        tmp_path, groups=_toy_groups(), config_hash="h", model_config={},
        step=0, epoch=0,
    )
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["components"]["weights"]["sha256"] = "0" * 64
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    ck = load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError, match="tampered|hash"):
        ck.load_group("weights")


def test_manifest_missing_fields_rejected(tmp_path):
    save_checkpoint(
        tmp_path, groups=_toy_groups(), config_hash="h", model_config={},
        step=0, epoch=0,
    )
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    del manifest["config_hash"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="config_hash"):
        load_checkpoint(tmp_path)


def test_config_hash_mismatch_and_force(tmp_path):
    save_checkpoint(
        tmp_path, groups=_toy_groups(), config_hash="aaa", model_config={},
        step=0, epoch=0,
    )
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path, expected_config_hash="bbb")
    ck = load_checkpoint(tmp_path, expected_config_hash="bbb", force=True)
    assert ck.config_hash == "aaa"


# -- training runs ------------------------------------------------------------------


def test_stage1_smoke_writes_loadable_checkpoint(tmp_path, tiny_corpus, tiny_vocab):
    result = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        _stage1_cfg(), tmp_path / "s1",
        run_config_hash="smoke",
    )
    ck = load_checkpoint(result.final_checkpoint)
    assert ck.step == 2  # 16 samples / batch 8
    assert {"visual_encoder", "adapter", "light_t", "optimizer", "rng"} <= set(
        ck.group_names()
    )
    assert (result.out_dir / "metrics.csv").is_file()


def test_lr_logged_at_step_zero_equals_peaks(tmp_path, tiny_corpus, tiny_vocab):
    cfg = _stage1_cfg(
        lr_groups={"visual_encoder": 3e-2, "adapter": 2e-3, "light_t": 1e-2}
    )
    result = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        cfg, tmp_path / "s1",
    )
    lines = (result.out_dir / "metrics.csv").read_text().splitlines()
    header = lines[0].split(",")
    first = dict(zip(header, lines[1].split(",")))
    assert first["step"] == "0"
    assert float(first["lr_visual_encoder"]) == pytest.approx(3e-2)
    assert float(first["lr_adapter"]) == pytest.approx(2e-3)
    assert float(first["lr_light_t"]) == pytest.approx(1e-2)


def test_stage1_loss_descends_over_epochs(tmp_path, tiny_corpus, tiny_vocab):
    deltas = []
    for seed in (0, 1, 2):
        result = run_stage1(
            tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
            _stage1_cfg(epochs=5, seed=seed), tmp_path / f"s{seed}",
        )
        deltas.append(result.epoch_losses[4] - result.epoch_losses[0])
    assert sorted(deltas)[1] < 0.0  # 3-seed median descends


def test_resume_reproduces_trajectory_bitwise(tmp_path, tiny_corpus, tiny_vocab):
    torch.set_num_threads(1)
    cfg = _stage1_cfg(epochs=4, seed=2)
    full = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        cfg, tmp_path / "full", run_config_hash="same",
    )
    # treat the full run's epoch-2 checkpoint as the interruption point
    resumed = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        cfg, tmp_path / "resumed", run_config_hash="same",
        resume_from=tmp_path / "full" / "checkpoints" / "epoch-0002",
    )
    assert resumed.step_losses == full.step_losses[len(full.step_losses) // 2 :]
    ck_full = load_checkpoint(full.final_checkpoint)
    ck_resumed = load_checkpoint(resumed.final_checkpoint)
    for group in ("visual_encoder", "adapter", "light_t"):
        assert group_checksum(ck_full.load_group(group)) == group_checksum(
            ck_resumed.load_group(group)
        )


def test_resume_rejects_config_hash_mismatch(tmp_path, tiny_corpus, tiny_vocab):
    cfg = _stage1_cfg()
    run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        cfg, tmp_path / "a", run_config_hash="hash-a",
    )
    with pytest.raises(CheckpointError, match="mismatch"):
        run_stage1(
            tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
            cfg, tmp_path / "b", run_config_hash="hash-b",
            resume_from=tmp_path / "a" / "final",
        )


def test_partial_load_visual_encoder_into_stage2(tmp_path, tiny_corpus, tiny_vocab):
    result = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        _stage1_cfg(), tmp_path / "s1",
    )
    ck = load_checkpoint(result.final_checkpoint)
    torch.manual_seed(77)
    backend = TinySeq2SeqBackend(
        TinyBackendConfig(
            layers=1, heads=2, hidden=16, ffn=32, vocab_size=tiny_vocab.size,
            max_positions=32,
        ),
        vocab=tiny_vocab,
    )
    pipeline = build_stage2_pipeline(ck, backend, tap="sign_wise")
    assert group_checksum(module_tensors(pipeline.visual_encoder)) == group_checksum(
        ck.load_group("visual_encoder")
    )


def test_run_stage2_missing_checkpoint(tmp_path, tiny_corpus, tiny_vocab):
    backend = TinySeq2SeqBackend(
        TinyBackendConfig(
            layers=1, heads=2, hidden=16, ffn=32, vocab_size=tiny_vocab.size,
            max_positions=32,
        ),
        vocab=tiny_vocab,
    )
    with pytest.raises(CheckpointError, match="manifest"):
        run_stage2(
            tiny_corpus, tiny_vocab, tmp_path / "missing", backend,
            StageConfig(
                optimizer="adam", lr_groups={"adapter": 1e-3, "backend": 1e-5},
                batch_size=8, epochs=1, seed=0, eval_every=0,
            ),
            tmp_path / "s2",
        )


def test_e2e_smoke_produces_trace(tmp_path, tiny_corpus, tiny_vocab):
    torch.manual_seed(5)
    backend = TinySeq2SeqBackend(
        TinyBackendConfig(
            layers=2, heads=2, hidden=16, ffn=32, vocab_size=tiny_vocab.size,
            max_positions=32,
        ),
        vocab=tiny_vocab,
    )
    result = run_joint_e2e(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, backend,
        StageConfig(
            optimizer="adam",
            lr_groups={"visual_encoder": 1e-3, "adapter": 1e-3, "backend": 1e-5},
            batch_size=8, epochs=1, seed=4, eval_every=0,
        ),
        tmp_path / "e2e",
    )
    assert result.trace is not None
    assert len(result.trace.records) == 2 * 2  # two layers, two steps
    assert (result.out_dir / "trace.csv").is_file()


def test_e2e_with_light_t_core_equals_stage1(tmp_path, tiny_corpus, tiny_vocab):
    """The joint baseline instantiated with the stage-1 head is stage 1."""
    torch.set_num_threads(1)
    cfg = _stage1_cfg(epochs=2, seed=9)
    lt_cfg = _lt_cfg(tiny_vocab.size)
    stage1 = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, lt_cfg, cfg, tmp_path / "s1"
    )
    joint = run_joint_e2e(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, lambda: LightT(lt_cfg), cfg,
        tmp_path / "joint",
    )
    assert joint.step_losses == stage1.step_losses


def test_stage2_hidden_states_tap_roundtrip(tmp_path, tiny_corpus, tiny_vocab):
    """Hidden-states tap carries the stage-1 adapter and text encoder over
    frozen, trains, checkpoints, and decodes after reloading."""
    stage1 = run_stage1(
        tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
        _stage1_cfg(), tmp_path / "s1",
    )
    torch.manual_seed(3)
    backend = TinySeq2SeqBackend(
        TinyBackendConfig(
            layers=1, heads=2, hidden=16, ffn=32, vocab_size=tiny_vocab.size,
            max_positions=32,
        ),
        vocab=tiny_vocab,
    )
    cfg = StageConfig(
        optimizer="adam", lr_groups={"adapter": 1e-3, "backend": 1e-5},
        batch_size=8, epochs=1, seed=0, eval_every=0,
    )
    result = run_stage2(
        tiny_corpus, tiny_vocab, stage1.final_checkpoint, backend, cfg,
        tmp_path / "s2", tap="hidden_states",
    )
    ck = load_checkpoint(result.final_checkpoint)
    assert {"vl_adapter", "lt_encoder"} <= set(ck.group_names())
    pipeline, vocab = load_pipeline(ck)
    assert pipeline.tap == "hidden_states"
    state = pipeline.start_decode(tiny_corpus.dev[0])
    assert pipeline.next_logprobs(state, [(1,)]).shape == (1, vocab.size)
    # the carried-over stage-1 modules stayed bitwise frozen
    s1_ck = load_checkpoint(stage1.final_checkpoint)
    assert group_checksum(ck.load_group("lt_encoder")) == group_checksum(
        s1_ck.load_group("light_t")
    )
    assert group_checksum(ck.load_group("vl_adapter")) == group_checksum(
        s1_ck.load_group("adapter")
    )


def test_divergence_aborts_with_dump(tmp_path, tiny_corpus, tiny_vocab):
    cfg = _stage1_cfg(
        epochs=2,
        lr_groups={"visual_encoder": 1e9, "adapter": 1e9, "light_t": 1e9},
    )
    with pytest.raises(DivergenceError):
        run_stage1(
            tiny_corpus, tiny_vocab, MICRO_VISUAL, _lt_cfg(tiny_vocab.size),
            cfg, tmp_path / "boom",
        )
    dump = json.loads((tmp_path / "boom" / "divergence.json").read_text())
    assert not math.isfinite(dump["loss"])


def test_matched_budget_rule():
    s1 = _stage1_cfg(epochs=4, batch_size=8)
    s2 = StageConfig(
        optimizer="adam", lr_groups={"adapter": 1e-3}, batch_size=16, epochs=2,
        seed=0,
    )
    # 16 samples: 2 steps/epoch * 4 + 1 step/epoch * 2 = 10 steps; e2e at
    # batch 16 runs 1 step/epoch, so it needs 10 epochs
    assert matched_e2e_epochs(16, s1, s2, e2e_batch=16) == 10


def test_stage_config_validation():
    with pytest.raises(ValueError, match="optimizer"):
        StageConfig(optimizer="rmsprop", lr_groups={"x": 1.0}).validate()
    with pytest.raises(ValueError, match="learning rate"):
        StageConfig(lr_groups={"x": 0.0}).validate()
    with pytest.raises(ValueError, match="epochs"):
        StageConfig(lr_groups={"x": 1.0}, epochs=0).validate()
