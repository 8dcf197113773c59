from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.config import load_experiment
from src.errors import VocabMismatchError
from src.prism.datagen import corpus_from_config, make_injection_set
from src.prism.evaluation import MetricsRecord, bleu_corpus, decode_pairs, stability_delta
from src.prism.models import init_model
from src.prism.protocols import (
    SUMMARY_ROWS,
    AcquisitionResult,
    ConceptResult,
    InjectionConfig,
    InjectionRun,
    acquisition_score,
    concept_breakdown,
    final_score_table,
    injection_summary,
    ismr_table,
    run_injection,
    run_ismr,
)
from src.prism.training import TrainConfig, train


def test_bleu_perfect_match():
    refs = [(5, 6, 7, 8), (9, 10, 11, 12, 13)]
    assert bleu_corpus(refs, refs) == pytest.approx(100.0)


def test_bleu_without_overlap_is_small_but_positive():
    hyps = [tuple(range(10 + 8 * i, 18 + 8 * i)) for i in range(20)]
    refs = [tuple(range(500 + 8 * i, 508 + 8 * i)) for i in range(20)]
    assert 0.0 < bleu_corpus(hyps, refs) < 1.0


def test_bleu_brevity_hand_case():
    score = bleu_corpus([(1, 2, 3, 4)], [(1, 2, 3, 4, 5)])
    assert score == pytest.approx(100.0 * math.exp(-0.25), abs=1e-9)
    assert score == pytest.approx(77.88, abs=0.005)


def test_bleu_of_empty_hypotheses_is_zero():
    assert bleu_corpus([()], [(1, 2)]) == 0.0


@pytest.mark.parametrize("pre, post, delta", [(21.40, 20.56, -0.84), (23.86, 13.31, -10.55), (17.0, 17.0, 0.0)])
def test_stability_delta(pre, post, delta):
    assert stability_delta(pre, post) == pytest.approx(delta, abs=1e-9)


def test_metrics_record_range_checks():
    with pytest.raises(ValueError):
        MetricsRecord("r", 0, 0, "valid", 1.0, 101.0)
    with pytest.raises(ValueError):
        MetricsRecord("r", 0, 0, "valid", 1.0, 10.0, acquisition=1.5)
    assert "acquisition" not in MetricsRecord("r", 0, 0, "valid", 1.0, 10.0).as_dict()


@pytest.fixture
def injection_set(tiny_corpus):
    return make_injection_set(tiny_corpus.lexicon, tiny_corpus.grammar, seed=3)


def test_acquisition_with_oracle_decoder(tiny_config, injection_set):
    model = init_model(tiny_config(), 0)
    oracle = [ex.pair.tgt[1:] for ex in injection_set.eval]
    result = acquisition_score(model, injection_set, oracle)
    assert result.score == 1.0
    assert result.concepts_acquired == 5 and result.exact == 25
    assert result.label() == "5/5 (25/25)"
    assert sum(c.successes for c in result.concepts) == result.successes


def test_acquisition_of_untrained_model_is_near_chance(tiny_config, injection_set):
    result = acquisition_score(init_model(tiny_config(), 0), injection_set)
    assert result.total == 25
    assert result.score <= 0.2
    assert sum(c.total for c in result.concepts) == 25


def test_decode_pairs_keeps_input_order(tiny_config, tiny_corpus):
    model = init_model(tiny_config("baseline"), 0)
    pairs = tiny_corpus.valid[:10]
    together = decode_pairs(model, pairs, token_budget=30)
    alone = [decode_pairs(model, [p])[0] for p in pairs]
    assert together == alone


def test_null_injection_changes_nothing(tiny_config, tiny_corpus, injection_set):
    model = init_model(tiny_config(), 0)
    before = {n: p.value.copy() for n, p in model.named_parameters().items()}
    run = run_injection(model, injection_set, tiny_corpus, InjectionConfig(steps=0, eval_limit=8), seed=0)
    assert run.updates == 0
    assert run.post_bleu == run.pre_bleu and run.stability_delta == 0.0
    assert run.post == run.pre
    for n, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.value, before[n])


@pytest.mark.parametrize("arch", ["baseline", "prism"])
def test_injection_updates_every_parameter(arch, tiny_config, tiny_corpus, injection_set, tmp_path):
    model = init_model(tiny_config(arch), 0)
    cfg = InjectionConfig(steps=2, eval_limit=8)
    run = run_injection(model, injection_set, tiny_corpus, cfg, seed=0, label=arch, out_dir=tmp_path)
    assert run.updates == 2
    assert set(run.update_norms) == {p.name for p in model.parameters()}
    assert all(norm > 0.0 for norm in run.update_norms.values())
    assert run.post_checkpoint == tmp_path / "post_injection.ckpt" and run.post_checkpoint.exists()


@pytest.mark.parametrize("steps", [2, 7])
def test_separate_batches_keep_the_step_budget(steps, tiny_config, tiny_corpus, injection_set):
    model = init_model(tiny_config(), 0)
    cfg = InjectionConfig(steps=steps, separate_batches=True, eval_limit=8)
    run = run_injection(model, injection_set, tiny_corpus, cfg, seed=0)
    assert run.updates == cfg.steps == run.steps
    assert len(run.interference) == 25 - run.post.successes


def test_separate_batches_rotate_through_concepts(tiny_config, tiny_corpus, injection_set):
    # два шага по кругу задевают два разных понятия, а не дважды первое
    cfg = InjectionConfig(steps=2, separate_batches=True, eval_limit=4)
    rotated = init_model(tiny_config(), 0)
    run_injection(rotated, injection_set, tiny_corpus, cfg, seed=0)

    first_only = replace(injection_set, train=tuple(ex for ex in injection_set.train if ex.concept == 0))
    repeated = init_model(tiny_config(), 0)
    run_injection(repeated, first_only, tiny_corpus, cfg, seed=0)
    assert not np.array_equal(rotated.target_table.value, repeated.target_table.value)


def test_injection_rejects_foreign_checkpoint(tiny_config, tiny_corpus, injection_set):
    model = init_model(tiny_config(vocab_hash="f" * 16), 0)
    with pytest.raises(VocabMismatchError):
        run_injection(model, injection_set, tiny_corpus, InjectionConfig(steps=0), seed=0)


def _fake_run(label: str, pre: float, post: float, hits: int) -> InjectionRun:
    concepts = tuple(ConceptResult(c, 100 + c, 200 + c, hits if c == 0 else 0, 5, 0) for c in range(5))
    result = AcquisitionResult(concepts)
    return InjectionRun(label, 0, 2e-4, 10, 10, pre, post, result, result)


def test_injection_summary_rows():
    rows = injection_summary({"PRISM": _fake_run("p", 21.40, 20.56, 3), "Baseline": _fake_run("b", 23.86, 13.31, 0)})
    assert rows[0] == ["metric", "PRISM", "Baseline"]
    assert [r[0] for r in rows[1:]] == list(SUMMARY_ROWS)
    assert rows[2][1:] == ["1/5 (3/25)", "0/5 (0/25)"]
    assert rows[4][1:] == ["-0.84", "-10.55"]


def test_concept_breakdown_rows():
    rows = concept_breakdown(_fake_run("p", 10.0, 10.0, 4))
    assert len(rows) == 6
    assert rows[1][-1] == "yes" and rows[2][-1] == "no"


def _records(steps, bleus, test_bleu):
    out = [MetricsRecord("r", 0, s, "valid", 1.0, b) for s, b in zip(steps, bleus)]
    return out + [MetricsRecord("r", 0, steps[-1], "test", 1.0, test_bleu)]


def _streams(offset: float):
    return {
        "iter1": _records([200, 400], [10.0 + offset, 20.0 + offset], 21.0 + offset),
        "iter2": _records([200, 400], [15.0 + offset, 22.0 + offset], 23.0 + offset),
        "ablation": _records([200, 400], [5.0 + offset, 12.0 + offset], 13.0 + offset),
    }


def test_ismr_table_single_seed_has_no_band():
    rows = ismr_table([_streams(0.0)])
    assert [r["step"] for r in rows] == [200, 400]
    assert set(rows[0]) == {"step", "baseline", "ismr", "ablation"}
    assert rows[1]["ismr"] == 22.0


def test_ismr_table_averages_over_seeds():
    runs = [_streams(float(k)) for k in range(4)]
    rows = ismr_table(runs)
    assert rows[0]["baseline"] == pytest.approx(11.5)
    assert rows[0]["baseline_min"] == 10.0 and rows[0]["baseline_max"] == 13.0
    assert rows[0]["baseline_ci_low"] < 11.5 < rows[0]["baseline_ci_high"]

    final = {r["group"]: r for r in final_score_table(runs)}
    assert final["ISMR"]["mean"] == pytest.approx(24.5) and final["ISMR"]["count"] == 4
    assert final["Ablation"]["std"] == pytest.approx(np.std([13, 14, 15, 16], ddof=1), abs=1e-4)


def test_run_ismr_transplant_contract(tiny_config, tiny_corpus, tmp_path):
    cfg = TrainConfig(steps=2, eval_steps=(1, 2), token_budget=200, warmup_steps=1, peak_lr=1e-3, eval_limit=4)
    seen = []
    run = run_ismr(tiny_config(), tiny_corpus, cfg, seed=2, out_dir=tmp_path, sink=lambda s, r: seen.append(s))
    np.testing.assert_array_equal(run.iter2_initial, run.semantic_map.matrix.data)
    e1, shuffled = run.semantic_map.matrix.data, run.ablation_map.matrix.data
    np.testing.assert_array_equal(np.sort(e1, axis=0), np.sort(shuffled, axis=0))
    steps = {name: [(r.step, r.split) for r in recs] for name, recs in run.streams.items()}
    assert steps["iter1"] == steps["iter2"] == steps["ablation"] == [(1, "valid"), (2, "valid"), (2, "test")]
    assert seen.count("iter2") == 3
    for name in ("iter1.ckpt", "iter2.ckpt", "ablation.ckpt", "semantic.map", "shuffled.map"):
        assert (tmp_path / name).exists()
    assert len(ismr_table([run.streams])) == 2


@pytest.mark.slow
def test_injection_on_trained_model_learns_concepts(tiny_config, tiny_corpus, injection_set):
    model = init_model(tiny_config(d_model=16), 0)
    cfg = TrainConfig(steps=400, eval_steps=(400,), token_budget=400, warmup_steps=40, peak_lr=2e-3, eval_limit=16)
    list(train(model, tiny_corpus, cfg, seed=0))
    run = run_injection(model, injection_set, tiny_corpus, replace(InjectionConfig(), lr=1e-3, steps=30), seed=0)
    assert run.post.successes >= run.pre.successes


def test_acquisition_score_is_deterministic(tiny_config, tiny_corpus, injection_set):
    model = init_model(tiny_config(), 0)
    cfg = TrainConfig(steps=3, eval_steps=(), token_budget=200, warmup_steps=1, peak_lr=1e-2, eval_limit=4)
    list(train(model, tiny_corpus, cfg, seed=0))
    first = acquisition_score(model, injection_set)
    second = acquisition_score(model, injection_set)
    assert first == second
    assert first.label() == second.label()


@pytest.mark.parametrize("steps", [5, 10])
def test_injection_runs_exact_step_count(steps, tiny_config, tiny_corpus, injection_set):
    model = init_model(tiny_config(), 0)
    run = run_injection(model, injection_set, tiny_corpus, InjectionConfig(steps=steps, eval_limit=4), seed=0)
    assert run.updates == steps and run.lr == pytest.approx(2e-4)


@pytest.mark.slow
def test_ismr_leads_baseline_early_on_most_seeds():
    cfg = load_experiment(Path(__file__).resolve().parents[1] / "configs" / "desk.env")
    corpus = corpus_from_config(cfg.data)
    model_config = replace(cfg.model, vocab_size=corpus.vocab.size, vocab_hash=corpus.vocab.hash)
    train_config = replace(cfg.train, steps=200, eval_steps=(200,))
    wins = 0
    for seed in cfg.train.seeds:
        run = run_ismr(model_config, corpus, train_config, seed)
        first = next(r.bleu for r in run.iter1 if r.split == "valid")
        second = next(r.bleu for r in run.iter2 if r.split == "valid")
        wins += second > first
    assert len(cfg.train.seeds) == 4
    assert wins >= 3
