"""Acceptance suite: every criterion at its stated tolerance, one
pass/fail line per criterion (run with -s to see them).

The training smoke run and the trained tokenizer are session fixtures so
the expensive work happens once.
"""

import csv
import json
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from jiang import autograd as ag
from jiang.cli import dispatch
from jiang.data_pipeline import (
    DiversityConfig, Document, FilterRules, HashedTrigramEmbedder, MixtureSpec,
    diversity_select, filter_document, read_jsonl,
)
from jiang.flash_attention import (
    AllocationTracker, TileConfig, naive_attention, tiled_attention,
)
from jiang.model import (
    ModelConfig, decoder_forward, init_weights, load_checkpoint, rope_apply,
    save_checkpoint,
)
from jiang.tokenizer import coverage, extend_vocab, train_bpe
from jiang.train_eval import (
    EvalItem, EvalTask, TrainSchedule, corpus_token_stream, evaluate_multichoice,
    train,
)

DATA = Path(__file__).parents[1] / "src" / "jiang" / "data"
FIXTURES = Path(__file__).parent / "fixtures"


def report(number: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# shared expensive artifacts

@pytest.fixture(scope="session")
def desk_vocab():
    corpus = (DATA / "desk_corpus_zh.txt").read_text(encoding="utf-8")
    chars = [c for c in (DATA / "chinese_chars.txt").read_text(encoding="utf-8").split("\n") if c]
    vocab = extend_vocab(train_bpe(corpus, 300), chars)
    return vocab, corpus


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    paragraph = ("语言模型的训练需要高质量的语料与稳定的优化过程，"
                 "the training loop packs documents into fixed-length sequences "
                 "and the loss should fall steadily while the model memorizes. ")
    corpus = paragraph * (10_240 // len(paragraph) + 1)
    corpus = corpus[:10_240]  # the 10 KB repeated corpus
    vocab = train_bpe(corpus, 60)
    config = ModelConfig(d_model=32, n_layers=2, n_heads=2, vocab_size=vocab.size,
                         max_seq_len=64, ffn_ratio=2.0)
    schedule = TrainSchedule(total_tokens=200 * 128, batch_token_budget=128,
                             seq_len_initial=16, seq_len_extended=32,
                             switch_threshold_tokens=100 * 128,
                             eval_every_steps=50, lr=5e-3, warmup_frac=0.02)
    weights = init_weights(config, seed=0)
    started = time.monotonic()
    result = train(weights, vocab, corpus_token_stream(corpus, vocab), schedule, out,
                   eval_texts=[corpus[:300]])
    elapsed = time.monotonic() - started
    return config, weights, vocab, schedule, result, elapsed


# ---------------------------------------------------------------------------
# 1. gradient fidelity

def test_criterion_1_gradient_fidelity():
    started = time.monotonic()
    config = ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=64,
                         max_seq_len=32, ffn_ratio=2.0, tied_head=True)
    weights = init_weights(config, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    tokens = rng.integers(0, 64, size=8)
    targets = rng.integers(0, 64, size=8)

    def loss_fn():
        return ag.cross_entropy(decoder_forward(tokens, config, weights), targets)

    weights.zero_grad()
    ag.backward(loss_fn())
    names = list(weights.params)
    coords = []
    for _ in range(50):
        name = names[int(rng.integers(len(names)))]
        coords.append((name, int(rng.integers(weights[name].size))))

    h = 1e-4
    worst = 0.0
    for name, flat_index in coords:
        param = weights[name]
        flat = param.data.reshape(-1)
        original = flat[flat_index]
        with ag.no_grad():
            flat[flat_index] = original + h
            up = loss_fn().item()
            flat[flat_index] = original - h
            down = loss_fn().item()
        flat[flat_index] = original
        numeric = (up - down) / (2 * h)
        analytic = param.grad.reshape(-1)[flat_index]
        worst = max(worst, ag.relative_error(analytic, numeric))
    elapsed = time.monotonic() - started
    report(1, worst < 1e-3 and elapsed < 30,
           f"full-decoder gradient check: max relative error {worst:.2e} "
           f"(< 1e-3) over 50 weights in {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 2. tiled-attention equivalence

def test_criterion_2_tiled_attention_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(3)
    worst32 = worst64 = 0.0
    for case in range(500):
        t_count = int(rng.integers(1, 129))
        heads = int(rng.integers(1, 4))
        d_head = int(rng.integers(1, 33))
        tiles = TileConfig(int(rng.integers(1, t_count + 1)),
                           int(rng.integers(1, t_count + 1)))
        causal = bool(rng.integers(2))
        base = rng.normal(size=(3, heads, t_count, d_head))
        for dtype in (np.float32, np.float64):
            q, k, v = (base[i].astype(dtype) for i in range(3))
            ref = naive_attention(q, k, v, causal=causal)
            with AllocationTracker() as tracker:
                out = tiled_attention(q, k, v, causal=causal, tiles=tiles)
            diff = float(np.abs(out - ref).max())
            if dtype == np.float32:
                worst32 = max(worst32, diff)
            else:
                worst64 = max(worst64, diff)
            assert tracker.max_elements("scores") <= tiles.block_q * tiles.block_kv
            if tiles.block_q * tiles.block_kv < t_count * t_count:
                assert tracker.max_elements("scores") < t_count * t_count
    # the fallback path carries the same no-score-matrix guarantee
    for case in range(50):
        t_count = int(rng.integers(2, 129))
        q = rng.normal(size=(1, t_count, 8)).astype(np.float32)
        tiles = TileConfig(int(rng.integers(1, max(2, t_count // 2))),
                           int(rng.integers(1, max(2, t_count // 2))))
        with AllocationTracker() as tracker:
            tiled_attention(q, q, q, causal=True, tiles=tiles, backend="python")
        assert tracker.max_elements("scores") < t_count * t_count
    elapsed = time.monotonic() - started
    report(2, worst32 < 1e-5 and worst64 < 1e-10 and elapsed < 60,
           f"500 random cases: |tiled-naive| max {worst32:.2e} FP32 (< 1e-5), "
           f"{worst64:.2e} FP64 (< 1e-10); no full score matrix allocated; "
           f"{elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 3. rotary relative-position property

def test_criterion_3_rope_shift_invariance():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        d_head = 2 * int(rng.integers(1, 33))
        q = rng.normal(size=d_head)
        k = rng.normal(size=d_head)
        m = int(rng.integers(0, 512))
        n = int(rng.integers(0, 512))
        shift = int(rng.integers(1, 256))

        def score(pos_q, pos_k):
            rq = rope_apply(ag.Tensor(q.reshape(1, 1, d_head)), [pos_q], 10000.0).data.ravel()
            rk = rope_apply(ag.Tensor(k.reshape(1, 1, d_head)), [pos_k], 10000.0).data.ravel()
            return float(rq @ rk)

        worst = max(worst, abs(score(m, n) - score(m + shift, n + shift)))
    report(3, worst < 1e-8,
           f"attention scores under uniform position shift: max drift {worst:.2e} (< 1e-8)")


# ---------------------------------------------------------------------------
# 4. bias policy structural check

def test_criterion_4_bias_policy_structure(tmp_path):
    config = ModelConfig(d_model=16, n_layers=3, n_heads=2, vocab_size=32,
                         max_seq_len=32, bias_policy="qkv_only", tied_head=True)
    path = tmp_path / "m.jckp"
    save_checkpoint(path, init_weights(config, seed=5), 0)
    _, records, _ = load_checkpoint(path)
    bias_records = {name for name in records if name.endswith(".bias")}
    expected = {f"layers.{i}.attn.{proj}.bias"
                for i in range(3) for proj in ("wq", "wk", "wv")}
    ok = bias_records == expected
    report(4, ok, f"qkv_only checkpoint carries bias tensors exactly for Q/K/V "
                  f"projections ({len(bias_records)} == {len(expected)} records)")


# ---------------------------------------------------------------------------
# 5. tokenizer round trip and coverage

def _fuzz_string(rng) -> str:
    pieces = []
    for _ in range(int(rng.integers(0, 24))):
        kind = rng.integers(4)
        if kind == 0:
            pieces.append(chr(int(rng.integers(0x20, 0x7F))))
        elif kind == 1:
            pieces.append(chr(int(rng.integers(0x4E00, 0xA000))))
        elif kind == 2:
            pieces.append(chr(int(rng.integers(1, 0xD800))))
        else:
            pieces.append(chr(int(rng.integers(0xE000, 0x110000))))
    return "".join(pieces)


def test_criterion_5_tokenizer(desk_vocab):
    started = time.monotonic()
    vocab, corpus = desk_vocab
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        s = _fuzz_string(rng)
        assert vocab.decode(vocab.encode(s)) == s
    cov = coverage(vocab, corpus)
    elapsed = time.monotonic() - started
    report(5, cov > 0.999 and elapsed < 60,
           f"decode∘encode exact on 10^4 fuzzed strings; desk-corpus coverage "
           f"{cov:.6f} (> 0.999) in {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 6. filter rule boundaries

def test_criterion_6_filter_boundaries():
    rules = FilterRules.default()
    base = "有效的中文正文内容，足够长而且标点正常。" * 3
    cases = [
        (base + " nsfw nsfw nsfw", None),
        (base + " nsfw nsfw nsfw nsfw", "nsfw"),
        (" ".join(["word"] * 19) + " 123, 456, 789.", "lang_count"),
        (" ".join(["word"] * 20) + " 123, 456, 789.", None),
    ]
    ok = all(filter_document(Document(f"b{i}", "s", text), rules) == want
             for i, (text, want) in enumerate(cases))
    fixture_ok = True
    expected = json.loads((FIXTURES / "expected_verdicts.json").read_text())
    for doc in read_jsonl(FIXTURES / "corpus500.jsonl"):
        if filter_document(doc, rules) != expected[doc.id]:
            fixture_ok = False
            break
    report(6, ok and fixture_ok,
           "3 vs 4 NSFW occurrences and 19 vs 20 language tokens produce the "
           "mandated verdicts; all 500 fixture documents agree")


# ---------------------------------------------------------------------------
# 7. diversity selection

def test_criterion_7_diversity_selection():
    rng = np.random.default_rng(7)
    docs = []
    for c in range(3):
        center = np.zeros(48)
        center[c] = 1.0
        for i in range(100):
            v = center + 0.15 * rng.normal(size=48)
            docs.append((f"c{c}_{i}", v / np.linalg.norm(v)))
    by_id = dict(docs)

    def mean_pairwise(ids):
        mat = np.stack([by_id[i] for i in ids])
        sims = mat @ mat.T
        n = len(ids)
        return (sims.sum() - n) / (n * (n - 1))

    div_mean = rand_mean = 0.0
    for seed in range(100):
        chosen = diversity_select(docs, DiversityConfig(target_count=30, seed=seed))
        div_mean += mean_pairwise(chosen)
        sel = np.random.default_rng(5000 + seed).choice(300, size=30, replace=False)
        rand_mean += mean_pairwise([docs[i][0] for i in sel])
    div_mean /= 100
    rand_mean /= 100

    twins = [("twin1", np.array([1.0, 0.0])), ("twin2", np.array([1.0, 0.0])),
             ("ortho", np.array([0.0, 1.0]))]
    twin_first = 0
    hand_trace_ok = True
    for seed in range(100):
        chosen = diversity_select(twins, DiversityConfig(target_count=2, seed=seed))
        if chosen[0] != "ortho":
            twin_first += 1
            hand_trace_ok &= chosen[1] == "ortho"
    report(7, div_mean < rand_mean and hand_trace_ok and twin_first > 0,
           f"selected sets mean pairwise cosine {div_mean:.4f} < random {rand_mean:.4f} "
           f"over 100 seeds; hand-trace chose the orthogonal doc second in all "
           f"{twin_first} twin-first runs")


# ---------------------------------------------------------------------------
# 8. mixture sampling

def test_criterion_8_mixture_shares():
    spec = MixtureSpec.table_defaults()
    rng = np.random.default_rng(8)
    n = 100_000
    counts = Counter(spec.sample_tag(rng) for _ in range(n))
    failures = []
    for tag, p in spec.proportions.items():
        sigma = math.sqrt(p * (1 - p) / n)
        if abs(counts[tag] / n - p) > 3 * sigma:
            failures.append(tag)
    ci_share = counts["chinese_internet"] / n
    ok = not failures and abs(ci_share - spec.proportions["chinese_internet"]) < 0.005
    report(8, ok, f"10^5 draws: every source within 3σ of its normalized share "
                  f"(chinese_internet {ci_share:.4f} vs {spec.proportions['chinese_internet']:.4f} ± 0.005)")


# ---------------------------------------------------------------------------
# 9. training smoke (steady-improvement analog)

def test_criterion_9_training_smoke(smoke_run):
    config, weights, vocab, schedule, result, elapsed = smoke_run
    loss_ok = result.losses[-1] < 0.5 * result.losses[0]
    ppl_ok = result.milestone_ppl[-1] < result.milestone_ppl[0]
    with open(result.metrics_path) as fh:
        rows = list(csv.DictReader(fh))
    switch_rows = [int(r["step"]) for r in rows if int(r["seq_len"]) == schedule.seq_len_extended]
    lengths = {int(r["seq_len"]) for r in rows}
    # the switch fires exactly when tokens_seen crossed the threshold
    first_extended = min(switch_rows)
    prev = next(r for r in rows if int(r["step"]) == first_extended - 1)
    switch_ok = (lengths == {schedule.seq_len_initial, schedule.seq_len_extended}
                 and int(prev["tokens_seen"]) >= schedule.switch_threshold_tokens
                 and all(int(r["seq_len"]) == schedule.seq_len_initial
                         for r in rows if int(r["step"]) < first_extended))
    report(9, loss_ok and ppl_ok and switch_ok and elapsed < 600,
           f"200 steps on 10KB corpus: loss {result.losses[0]:.3f} -> {result.losses[-1]:.3f} "
           f"(< 0.5x), milestone ppl {result.milestone_ppl[0]:.2f} -> {result.milestone_ppl[-1]:.2f} "
           f"(strictly better), seq-len switch at step {first_extended} in CSV; "
           f"{elapsed:.0f}s (< 600s)")


# ---------------------------------------------------------------------------
# 10. CLI determinism

def test_criterion_10_cli_determinism(tmp_path, capsys):
    corpus = ("determinism check corpus with some text. " * 30
              + "确定性训练语料。" * 15)
    (tmp_path / "corpus.txt").write_text(corpus, encoding="utf-8")
    (tmp_path / "run.cfg").write_text("\n".join([
        "d_model=16", "n_layers=1", "n_heads=2", "max_seq_len=64", "ffn_ratio=1.0",
        "total_tokens=640", "batch_token_budget=128", "seq_len_initial=16",
        "seq_len_extended=32", "switch_threshold_tokens=320", "eval_every_steps=2",
        "corpus=corpus.txt",
    ]) + "\n", encoding="utf-8")
    train_outputs = []
    for name in ("t1", "t2"):
        assert dispatch(["train", "--config", str(tmp_path / "run.cfg"), "--seed", "7",
                         "--out", str(tmp_path / name)]) == 0
        train_outputs.append(((tmp_path / name / "metrics.csv").read_bytes(),
                              (tmp_path / name / "train_manifest.json").read_bytes()))
    pipeline_outputs = []
    for name in ("p1", "p2"):
        assert dispatch(["pipeline", "run", "--input", str(FIXTURES),
                         "--output", str(tmp_path / name), "--target-count", "5",
                         "--seed", "3"]) == 0
        pipeline_outputs.append(((tmp_path / name / "manifest.json").read_bytes(),
                                 (tmp_path / name / "selected.jsonl").read_bytes()))
    ok = (train_outputs[0] == train_outputs[1] and pipeline_outputs[0] == pipeline_outputs[1])
    report(10, ok, "repeated train and pipeline runs with identical seed/config "
                   "produce byte-identical metrics CSV and manifests")


# ---------------------------------------------------------------------------
# 11. multiple-choice harness

def test_criterion_11_multichoice(smoke_run):
    # chance level: balanced synthetic 4-choice task, random-weight model
    vocab = train_bpe("abcdefgh", 0)
    config = ModelConfig(d_model=16, n_layers=1, n_heads=2, vocab_size=vocab.size,
                         max_seq_len=64)
    weights = init_weights(config, seed=9)
    rng = np.random.default_rng(10)
    choices = ("alpha", "bravo", "charlie", "delta")
    items = []
    for _ in range(1000):
        perm = rng.permutation(4)
        items.append(EvalItem(context="pick one: ",
                              choices=[choices[j] for j in perm],
                              answer=int(rng.integers(4))))
    chance = evaluate_multichoice(weights, vocab, EvalTask(items)).accuracy
    chance_ok = abs(chance - 0.25) < 0.05

    # a model overfit on the smoke corpus scores 1.0 on memorized items
    s_config, s_weights, s_vocab, _, _, _ = smoke_run
    memorized = [
        EvalItem("语言模型的训练需要高质量的", ["语料与稳定的优化过程", "随机噪声", "qqqq", "1234"], 0),
        EvalItem("the training loop packs documents into ",
                 ["fixed-length sequences", "zzzz xxxx", "%%%%", "9999"], 0),
        EvalItem("and the loss should fall ", ["steadily", "upward!", "损失", "@@"], 0),
    ]
    overfit = evaluate_multichoice(s_weights, s_vocab, EvalTask(memorized)).accuracy
    report(11, chance_ok and overfit == 1.0,
           f"random model scores {chance:.3f} on balanced 4-choice task (0.25 ± 0.05); "
           f"overfit model scores {overfit:.2f} on memorized items (== 1.0)")
