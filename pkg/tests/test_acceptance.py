"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they
complete. Criteria 3 through 7 share the session-scoped 3-seed experiment
matrix from tests/trendkit.py; the tolerances and thresholds below are fixed.
"""

import math
import time

import numpy as np
import pytest
import torch

from factored_slt.corpus import BOS_ID, EOS_ID
from factored_slt.evalkit import beam_search, bleu, rouge_l
from factored_slt.light_t import (
    LightT,
    LightTConfig,
    TargetEmbedding,
    label_smoothed_ce,
    smoothed_target_entropy,
)
from factored_slt.llm_stage import llm_adapter
from factored_slt.trainer import StageConfig, load_pipeline, run_stage1
from factored_slt.checkpoint import load_checkpoint
from factored_slt.evalkit import evaluate_model, write_report
from factored_slt.visual_encoder import (
    FeatureSequence,
    TemporalModule,
    VisualBackbone,
    vl_adapter,
)
from tests.conftest import MICRO_VISUAL
from tests.oracles import (
    adam_reference,
    bleu_reference,
    exhaustive_best,
    greedy_decode,
    max_relative_grad_error,
    rouge_l_reference,
    seeded_score_fn,
    sgd_momentum_reference,
    smoothed_ce_reference,
)


def _verdict(criterion: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    assert ok, f"{criterion}: {detail}"


# -- criterion 1: oracle suite (exact) ------------------------------------------


def test_criterion_1_oracle_suite():
    started = time.perf_counter()

    # beam search vs exhaustive enumeration, every vocab <= 6 / max_len <= 4
    for vocab in range(2, 7):
        for max_len in (2, 3, 4):
            for seed in range(3):
                fn = seeded_score_fn(seed * 31 + vocab, vocab)
                hyp = beam_search(fn, beam=vocab ** (max_len - 1), max_len=max_len)
                norm, ids, _ = exhaustive_best(fn, vocab, max_len, BOS_ID, EOS_ID)
                assert hyp.ids == ids
                assert hyp.normalized_score() == pytest.approx(norm, abs=1e-12)

    # beam width 1 is greedy on 100 seeded score functions
    for seed in range(100):
        fn = seeded_score_fn(seed, 7)
        hyp = beam_search(fn, beam=1, max_len=6)
        ids, score = greedy_decode(fn, 6, BOS_ID, EOS_ID)
        assert hyp.ids == ids and hyp.score == pytest.approx(score, abs=1e-12)

    # corpus BLEU vs the independent Counter-based script, 50 random corpora
    rng = np.random.default_rng(17)
    words = ["a", "b", "c", "d"]
    for _ in range(50):
        n = int(rng.integers(1, 6))
        hyps = [
            " ".join(words[i] for i in rng.integers(0, 4, size=rng.integers(1, 8)))
            for _ in range(n)
        ]
        refs = [
            " ".join(words[i] for i in rng.integers(0, 4, size=rng.integers(1, 8)))
            for _ in range(n)
        ]
        ours = bleu(hyps, refs)
        for max_n in range(1, 5):
            assert ours[max_n] == pytest.approx(bleu_reference(hyps, refs, max_n), abs=1e-9)
        assert rouge_l(hyps, refs) == pytest.approx(rouge_l_reference(hyps, refs), abs=1e-9)
    assert bleu(["a b c d"], ["a b c d e"])[4] == pytest.approx(
        math.exp(-0.25), abs=1e-9
    )

    # label-smoothed CE vs arbitrary-precision computation, plus the floor
    probs = [0.7, 0.1, 0.1, 0.1]
    logprobs = torch.log(torch.tensor(probs, dtype=torch.float64)).view(1, 1, 4)
    loss = label_smoothed_ce(
        logprobs, torch.tensor([[0]]), torch.ones(1, 1, dtype=torch.bool), 0.2
    )
    assert float(loss) == pytest.approx(smoothed_ce_reference(probs, 0, 0.2), abs=1e-9)
    for seed in range(20):
        torch.manual_seed(seed)
        lp = torch.log_softmax(torch.randn(2, 3, 6, dtype=torch.float64), dim=-1)
        tgt = torch.randint(0, 6, (2, 3))
        msk = torch.ones(2, 3, dtype=torch.bool)
        assert float(label_smoothed_ce(lp, tgt, msk, 0.2)) >= smoothed_target_entropy(6, 0.2) - 1e-12

    # one SGD-momentum step and one Adam step vs closed forms
    a, b = 3.0, 0.5
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=0.1, momentum=0.9)
    loss = 0.5 * (a * p[0] ** 2 + b * p[1] ** 2)
    loss.backward()
    opt.step()
    expected = sgd_momentum_reference(
        [1.0, -2.0], lambda q: np.array([a * q[0], b * q[1]]), 0.1, 0.9, steps=1
    )
    assert np.allclose(p.detach().numpy(), expected, atol=1e-9, rtol=0)

    p = torch.nn.Parameter(torch.tensor([0.7, -1.3], dtype=torch.float64))
    opt = torch.optim.Adam([p], lr=1e-2)
    loss = 0.5 * (a * p[0] ** 2 + b * p[1] ** 2)
    loss.backward()
    opt.step()
    expected = adam_reference(
        [0.7, -1.3], lambda q: np.array([a * q[0], b * q[1]]), 1e-2, steps=1
    )
    assert np.allclose(p.detach().numpy(), expected, atol=1e-9, rtol=0)

    elapsed = time.perf_counter() - started
    _verdict("1 oracle-suite", elapsed < 120.0, f"all oracles matched, {elapsed:.1f}s")


# -- criterion 2: numerical suite -------------------------------------------------


def test_criterion_2_numerical_suite():
    started = time.perf_counter()
    checks = []

    def fd_both(module, loss_fn, label):
        err32 = max_relative_grad_error(module, loss_fn)
        err64 = max_relative_grad_error(module.double(), loss_fn)
        checks.append((label, err32, err64))
        assert err32 < 1e-3, f"{label}: 32-bit error {err32}"
        assert err64 < 1e-5, f"{label}: 64-bit error {err64}"

    torch.manual_seed(0)
    backbone = VisualBackbone((3,))
    frames = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    w_out = torch.randn(2, 3, dtype=torch.float64)
    backbone.train()
    fd_both(
        backbone,
        lambda m: (m(frames.to(next(m.parameters()).dtype)) * w_out.to(next(m.parameters()).dtype)).sum(),
        "backbone-block",
    )

    temporal = TemporalModule(channels=3, kernel=3)
    temporal.train()
    x_t = torch.randn(1, 4, 3, dtype=torch.float64)
    w_t = torch.randn(1, 4, 3, dtype=torch.float64)

    def temporal_loss(m):
        dtype = next(m.parameters()).dtype
        feats = FeatureSequence(
            values=x_t.to(dtype), lengths=torch.tensor([4]), tap="frame_wise"
        )
        return (m(feats).values * w_t.to(dtype)).sum()

    fd_both(temporal, temporal_loss, "temporal-module")

    for label, adapter in (
        ("vl-adapter", vl_adapter(3, 4, 5)),
        ("llm-adapter", llm_adapter(3, 5)),
    ):
        x_a = torch.randn(2, 3, 3, dtype=torch.float64)
        w_a = torch.randn(2, 3, adapter.out_dim, dtype=torch.float64)
        fd_both(
            adapter,
            lambda m, x=x_a, w=w_a: (
                m(x.to(next(m.parameters()).dtype)) * w.to(next(m.parameters()).dtype)
            ).sum(),
            label,
        )

    lt = LightT(
        LightTConfig(layers=1, heads=2, hidden=8, ffn=12, vocab_size=7,
                     max_positions=16, dropout=0.0)
    )
    lt.train()
    feats = torch.randn(1, 3, 8, dtype=torch.float64)
    mask = torch.ones(1, 3, dtype=torch.bool)
    ids = torch.tensor([[1, 4, 2, 5]])
    tmask = torch.ones(1, 4, dtype=torch.bool)

    def lt_loss(m):
        loss, _ = m(feats.to(next(m.parameters()).dtype), mask, ids, tmask, 0.2)
        return loss

    fd_both(lt, lt_loss, "light-t-blocks-and-lm-head")

    emb = TargetEmbedding(vocab_size=7, dim=4, max_positions=8)
    ids_e = torch.tensor([[0, 3, 5, 3]])
    w_e = torch.randn(1, 4, 4, dtype=torch.float64)
    fd_both(
        emb,
        lambda m: (m(ids_e) * w_e.to(next(m.parameters()).dtype)).sum(),
        "word-embedding",
    )

    # decoder causality and encoder padding isolation at 1e-6
    torch.manual_seed(0)
    model = LightT(
        LightTConfig(layers=2, heads=2, hidden=16, ffn=32, vocab_size=11,
                     max_positions=32, dropout=0.0)
    ).eval()
    with torch.no_grad():
        feats = torch.rand(1, 6, 16)
        mask = torch.tensor([[True, True, True, True, False, False]])
        base = model.encode_embeddings(feats, mask)
        poked = feats.clone()
        poked[0, 4:] += 2.0
        assert float(
            (model.encode_embeddings(poked, mask)[0, :4] - base[0, :4]).abs().max()
        ) <= 1e-6
        memory = model.encode_embeddings(torch.rand(1, 3, 16), torch.ones(1, 3, dtype=torch.bool))
        dec_ids = torch.tensor([[1, 4, 5, 6]])
        base_dec = model.decode_logprobs(dec_ids, memory, torch.ones(1, 3, dtype=torch.bool))
        changed = dec_ids.clone()
        changed[0, -1] = 9
        out_dec = model.decode_logprobs(changed, memory, torch.ones(1, 3, dtype=torch.bool))
        assert float((out_dec[:, :-1] - base_dec[:, :-1]).abs().max()) <= 1e-6

    elapsed = time.perf_counter() - started
    worst32 = max(err for _, err, _ in checks)
    worst64 = max(err for _, _, err in checks)
    _verdict(
        "2 numerical-suite",
        elapsed < 300.0,
        f"worst fd error 32-bit {worst32:.2e}, 64-bit {worst64:.2e}; "
        f"causality/padding at 1e-6; {elapsed:.1f}s",
    )


# -- criteria 3-7: trend experiments ------------------------------------------------


def test_criterion_3_freeze_invariance(trend_results):
    ok = all(
        o.frozen_checksum_before == o.frozen_checksum_after
        for o in trend_results.outcomes
    )
    _verdict(
        "3 freeze-invariance",
        ok,
        "visual-encoder group checksum (params + running stats) bitwise equal "
        "across every full stage-2 run",
    )


def test_criterion_4_dominance(trend_results):
    # observed reference fractions (seeds 0/1/2): 0.87 / 0.92 / 0.90
    fraction = trend_results.median("dominance_fraction")
    steps = trend_results.outcomes[0].dominance_steps
    runtime = sum(o.dominance_time_s for o in trend_results.outcomes)
    _verdict(
        "4 dominance",
        fraction >= 0.70 and runtime < 900.0,
        f"3-seed median backend-exceeds fraction {fraction:.3f} over {steps} steps "
        f"(threshold 0.70), dominance runs took {runtime:.0f}s (< 900s)",
    )


def test_criterion_5_factorized_vs_e2e(trend_results):
    """Observed reference values (seeds 0/1/2): factorized 0.938/0.896/0.940,
    joint baseline 0.998/1.000/1.000. The level bar holds with margin; the
    +0.10 gap over the joint baseline does not materialize at desk scale,
    where joint training solves the synthetic task outright under every
    recipe tried (the backend is orders of magnitude smaller than the regime
    the ordering comes from). Kept faithful rather than weakened."""
    factorized = trend_results.median("stage2_test_bleu4")
    gap = trend_results.median_diff("stage2_test_bleu4", "e2e_test_bleu4")
    runtime = sum(o.factorized_vs_e2e_time_s for o in trend_results.outcomes)
    ok = factorized >= 0.80 and gap >= 0.10 and runtime < 1800.0
    _verdict(
        "5 factorized-vs-e2e",
        ok,
        f"median factorized test BLEU-4 {factorized:.3f} (>= 0.80), "
        f"median gap over e2e {gap:.3f} (>= 0.10), "
        f"comparison runs took {runtime:.0f}s (< 1800s)",
    )


def test_criterion_6_stage_contribution(trend_results):
    # observed reference medians: full 0.938 vs stage-2-only 0.024
    diff = trend_results.median_diff("stage2_test_bleu4", "nostage1_test_bleu4")
    _verdict(
        "6 stage-contribution",
        diff > 0.0,
        f"full pipeline beats stage-2-only by median {diff:.3f} test BLEU-4",
    )


def test_criterion_7_backend_pretraining(trend_results):
    # observed reference medians: pretrained 0.938 vs random-init 0.458
    diff = trend_results.median_diff(
        "stage2_test_bleu4", "random_backend_test_bleu4"
    )
    _verdict(
        "7 backend-pretraining",
        diff > 0.0,
        f"pretrained backend beats random initialization by median {diff:.3f} "
        f"test BLEU-4",
    )


# -- criterion 8: determinism ---------------------------------------------------------


def test_criterion_8_determinism(tmp_path, tiny_corpus, tiny_vocab):
    torch.set_num_threads(1)  # strict single-threaded reproducibility mode
    cfg = StageConfig(
        optimizer="sgd", momentum=0.9,
        lr_groups={"visual_encoder": 1e-2, "adapter": 1e-2, "light_t": 1e-2},
        batch_size=8, epochs=2, seed=13, eval_every=0,
    )
    lt_cfg = LightTConfig(
        layers=1, heads=2, hidden=16, ffn=32, vocab_size=tiny_vocab.size,
        max_positions=64, dropout=0.1,
    )

    def one_run(tag):
        out = tmp_path / tag
        run_stage1(tiny_corpus, tiny_vocab, MICRO_VISUAL, lt_cfg, cfg, out)
        pipeline, _ = load_pipeline(load_checkpoint(out / "final"))
        report = evaluate_model(
            pipeline, tiny_corpus.test, tiny_vocab, beam=3, max_len=10
        )
        write_report(report, out / "eval")
        return out

    first = one_run("a")
    second = one_run("b")
    metrics_equal = (first / "metrics.csv").read_bytes() == (
        second / "metrics.csv"
    ).read_bytes()
    report_equal = (first / "eval" / "report.json").read_bytes() == (
        second / "eval" / "report.json"
    ).read_bytes()
    _verdict(
        "8 determinism",
        metrics_equal and report_equal,
        "loss curves and eval reports bitwise identical across two seeded "
        "single-threaded runs",
    )
