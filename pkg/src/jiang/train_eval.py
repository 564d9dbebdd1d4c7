"""Training loop with token-budget batching and the two-stage sequence
length schedule, AdamW with decoupled weight decay and global-norm
clipping, milestone evaluation (perplexity and multiple-choice
log-likelihood), and generation.

One thread owns the weights during training; evaluation always runs on a
read-only snapshot under ``no_grad``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import DecoderWeights, decoder_forward, load_weights, save_checkpoint
from .tokenizer import Vocabulary


class GradientError(ArithmeticError):
    """Non-finite gradients; the optimizer step was aborted."""


@dataclass
class TrainSchedule:
    total_tokens: int
    batch_token_budget: int = 8192
    seq_len_initial: int = 128
    seq_len_extended: int = 256
    switch_threshold_tokens: int = 1_000_000
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    eval_every_steps: int = 50
    warmup_frac: float = 0.01
    lr_min_ratio: float = 0.1

    def __post_init__(self):
        if self.seq_len_extended < self.seq_len_initial:
            raise ValueError("seq_len_extended must be >= seq_len_initial")
        if self.batch_token_budget < self.seq_len_extended:
            raise ValueError("batch_token_budget must cover at least one sequence")
        if self.seq_len_initial < 2:
            raise ValueError("sequence length must be >= 2 to form targets")
        if self.total_tokens < 1:
            raise ValueError("total_tokens must be positive")

    @property
    def total_steps(self) -> int:
        return max(1, math.ceil(self.total_tokens / self.batch_token_budget))


def seq_len_at(tokens_seen: int, schedule: TrainSchedule) -> int:
    """Step function with a single switch at the threshold (inclusive)."""
    if tokens_seen < 0:
        raise ValueError("tokens_seen must be >= 0")
    if tokens_seen >= schedule.switch_threshold_tokens:
        return schedule.seq_len_extended
    return schedule.seq_len_initial


def lr_at(step: int, schedule: TrainSchedule) -> float:
    """Linear warmup over the first warmup fraction of steps, then cosine
    decay to lr * lr_min_ratio."""
    warmup = max(1, int(schedule.warmup_frac * schedule.total_steps))
    if step < warmup:
        return schedule.lr * (step + 1) / warmup
    span = max(1, schedule.total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    floor = schedule.lr * schedule.lr_min_ratio
    return floor + (schedule.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        """Aborts (params untouched) if any gradient is non-finite."""
        lr = self.lr if lr is None else lr
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise GradientError(f"non-finite gradient in {name}; step aborted")
            grads[name] = p.grad
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for name, g in grads.items():
            p = self.params[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_records(self) -> dict[str, np.ndarray]:
        records = {f"opt.m.{n}": a for n, a in self.m.items()}
        records.update({f"opt.v.{n}": a for n, a in self.v.items()})
        records["opt.step"] = np.array([float(self.step_count)], dtype=np.float32)
        return records

    def load_state_records(self, records: dict[str, np.ndarray]) -> None:
        for name in self.params:
            self.m[name] = records[f"opt.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = records[f"opt.v.{name}"].astype(self.v[name].dtype)
        self.step_count = int(records["opt.step"][0])


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# training

METRICS_HEADER = ["step", "tokens_seen", "seq_len", "loss", "lr", "eval_ppl", "eval_acc"]


@dataclass
class EvalItem:
    context: str
    choices: list[str]
    answer: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError("an item needs at least 2 choices")
        if not 0 <= self.answer < len(self.choices):
            raise ValueError(f"answer index {self.answer} out of range")


@dataclass
class EvalTask:
    items: list[EvalItem]

    @classmethod
    def load_jsonl(cls, path) -> "EvalTask":
        items = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                items.append(EvalItem(rec["context"], list(rec["choices"]), int(rec["answer"])))
        return cls(items)


@dataclass
class TrainResult:
    steps: int
    tokens_seen: int
    metrics_path: Path
    final_checkpoint: Path
    losses: list[float] = field(default_factory=list)
    milestone_ppl: list[float] = field(default_factory=list)


def _batched_ids(stream: Iterator[int], n_seq: int, seq_len: int) -> list[np.ndarray] | None:
    seqs = []
    buf = []
    for token in stream:
        buf.append(token)
        if len(buf) == seq_len:
            seqs.append(np.asarray(buf, dtype=np.int64))
            buf = []
            if len(seqs) == n_seq:
                return seqs
    return seqs or None


def train(weights: DecoderWeights, tokenizer: Vocabulary,
          stream_factory: Callable[[], Iterator[int]], schedule: TrainSchedule,
          out_dir, eval_texts: Sequence[str] | None = None,
          eval_task: "EvalTask | None" = None, resume_from=None) -> TrainResult:
    """Run until the token budget is exhausted, writing one metrics CSV
    row per step and a checkpoint at every evaluation milestone.

    The stream factory must produce the same token sequence every call;
    resuming replays the stream up to the checkpointed position, which
    makes a resumed run reproduce the uninterrupted one exactly.
    """
    config = weights.config
    if config.vocab_size < tokenizer.size:
        raise ValueError(f"model vocab {config.vocab_size} smaller than tokenizer {tokenizer.size}")
    if schedule.seq_len_extended > config.max_seq_len:
        raise ValueError("schedule sequence length exceeds model max_seq_len")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    opt = AdamW(weights.params, lr=schedule.lr, betas=schedule.betas,
                eps=schedule.eps, weight_decay=schedule.weight_decay)
    tokens_seen = 0
    if resume_from is not None:
        restored, tokens_seen, extra = load_weights(resume_from)
        if restored.config != config:
            raise ValueError("resume checkpoint was built for a different model config")
        for name, p in weights.params.items():
            p.data = restored.params[name].data
        opt.load_state_records(extra)

    stream = stream_factory()
    for _ in range(tokens_seen):  # replay consumed tokens on resume
        next(stream)

    result = TrainResult(steps=opt.step_count, tokens_seen=tokens_seen,
                         metrics_path=metrics_path, final_checkpoint=out_dir / "final.jckp")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        while tokens_seen < schedule.total_tokens:
            step = opt.step_count
            seq_len = seq_len_at(tokens_seen, schedule)
            n_seq = max(1, schedule.batch_token_budget // seq_len)
            seqs = _batched_ids(stream, n_seq, seq_len)
            if seqs is None:
                break
            loss_sum = None
            for ids in seqs:
                logits = decoder_forward(ids[:-1], config, weights)
                loss = ag.cross_entropy(logits, ids[1:])
                loss_sum = loss if loss_sum is None else ag.add(loss_sum, loss)
            loss_mean = ag.scale(loss_sum, 1.0 / len(seqs))
            opt.zero_grad()
            ag.backward(loss_mean)
            clip_grad_norm(weights.params, schedule.grad_clip)
            lr = lr_at(step, schedule)
            opt.step(lr=lr)
            tokens_seen += len(seqs) * seq_len
            loss_value = loss_mean.item()
            result.losses.append(loss_value)

            eval_ppl = ""
            eval_acc = ""
            if opt.step_count % schedule.eval_every_steps == 0 or tokens_seen >= schedule.total_tokens:
                if eval_texts:
                    ppl = evaluate_ppl(weights, tokenizer, eval_texts)
                    result.milestone_ppl.append(ppl)
                    eval_ppl = f"{ppl:.6f}"
                if eval_task:
                    eval_acc = f"{evaluate_multichoice(weights, tokenizer, eval_task).accuracy:.6f}"
                save_checkpoint(out_dir / f"step{opt.step_count:06d}.jckp", weights,
                                tokens_seen, extra=opt.state_records())
            writer.writerow([opt.step_count, tokens_seen, seq_len,
                             f"{loss_value:.6f}", f"{lr:.8f}", eval_ppl, eval_acc])
    save_checkpoint(result.final_checkpoint, weights, tokens_seen, extra=opt.state_records())
    result.steps = opt.step_count
    result.tokens_seen = tokens_seen
    return result


def corpus_token_stream(text: str, tokenizer: Vocabulary) -> Callable[[], Iterator[int]]:
    """Factory for an endless stream over one corpus: documents separated
    by end-of-text, repeated from the top when exhausted."""
    ids = tokenizer.encode(text)
    ids.append(tokenizer.eot_id)

    def factory() -> Iterator[int]:
        while True:
            yield from ids

    return factory


# ---------------------------------------------------------------------------
# evaluation

def _log_probs(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return logits - m - np.log(e.sum(axis=-1, keepdims=True))


def evaluate_ppl(weights: DecoderWeights, tokenizer: Vocabulary,
                 texts: Sequence[str]) -> float:
    """exp(mean token-level negative log-likelihood), teacher-forced,
    each document scored independently with an end-of-text lead-in."""
    if not texts:
        raise ValueError("evaluate_ppl: empty text set")
    total_nll = 0.0
    total_tokens = 0
    config = weights.config
    with ag.no_grad():
        for text in texts:
            ids = [tokenizer.eot_id] + tokenizer.encode(text)
            ids = ids[: config.max_seq_len + 1]
            logits = decoder_forward(ids[:-1], config, weights).data
            lp = _log_probs(logits)
            targets = np.asarray(ids[1:])
            total_nll -= lp[np.arange(len(targets)), targets].sum()
            total_tokens += len(targets)
    return float(np.exp(total_nll / total_tokens))


@dataclass
class MultiChoiceResult:
    accuracy: float
    picks: list[int]
    scores: list[list[float]]
    ties: int


def evaluate_multichoice(weights: DecoderWeights, tokenizer: Vocabulary,
                         task: EvalTask, normalization: str = "none") -> MultiChoiceResult:
    """Score each choice by the summed log-probability of its tokens
    conditioned on the context; the argmax (optionally normalized by
    choice character length) is the prediction. Exact ties resolve to the
    lowest choice index and are counted."""
    if normalization not in ("none", "per_char"):
        raise ValueError(f"unknown normalization {normalization!r}")
    config = weights.config
    picks: list[int] = []
    all_scores: list[list[float]] = []
    ties = 0
    correct = 0
    with ag.no_grad():
        for item in task.items:
            ctx = [tokenizer.eot_id] + tokenizer.encode(item.context)
            scores = []
            for choice in item.choices:
                choice_ids = tokenizer.encode(choice)
                if not choice_ids:
                    raise ValueError(f"choice {choice!r} tokenizes to zero tokens")
                ids = ctx + choice_ids
                if len(ids) > config.max_seq_len + 1:
                    raise ValueError("context+choice exceeds max_seq_len")
                logits = decoder_forward(ids[:-1], config, weights).data
                lp = _log_probs(logits)
                span = np.arange(len(ctx) - 1, len(ids) - 1)
                score = float(lp[span, np.asarray(choice_ids)].sum())
                if normalization == "per_char":
                    score /= max(1, len(choice))
                scores.append(score)
            best = max(scores)
            winners = [i for i, s in enumerate(scores) if s == best]
            if len(winners) > 1:
                ties += 1
            pick = winners[0]
            picks.append(pick)
            all_scores.append(scores)
            correct += pick == item.answer
    return MultiChoiceResult(accuracy=correct / len(task.items), picks=picks,
                             scores=all_scores, ties=ties)


# ---------------------------------------------------------------------------
# generation

def generate(weights: DecoderWeights, tokenizer: Vocabulary, prompt: str,
             max_new: int = 64, strategy: str = "greedy", temperature: float = 1.0,
             top_k: int = 0, seed: int = 0) -> str:
    """Continue a prompt. Greedy is deterministic; temperature and top-k
    sampling are seeded-deterministic. Stops at end-of-text or max_new.

    A model is free to emit byte tokens that do not assemble into valid
    UTF-8 (truncation can even split a character), so the continuation is
    decoded with replacement rather than raising.
    """
    if strategy not in ("greedy", "temperature", "top_k"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    config = weights.config
    ids = [tokenizer.eot_id] + tokenizer.encode(prompt)
    if len(ids) > config.max_seq_len:
        raise ValueError(f"prompt of {len(ids)} tokens exceeds max_seq_len {config.max_seq_len}")
    rng = np.random.default_rng(seed)
    new_ids: list[int] = []
    with ag.no_grad():
        for _ in range(max_new):
            window = ids[-config.max_seq_len:]
            logits = decoder_forward(window, config, weights).data[-1]
            if strategy == "greedy":
                token = int(np.argmax(logits))
            else:
                z = logits.astype(np.float64)
                if strategy == "top_k" and top_k > 0:
                    cutoff = np.sort(z)[-top_k]
                    z = np.where(z >= cutoff, z, -np.inf)
                t = max(temperature, 1e-8)
                z = z / t
                z -= z.max()
                p = np.exp(z)
                p /= p.sum()
                token = int(rng.choice(len(p), p=p))
            if token == tokenizer.eot_id:
                break
            ids.append(token)
            new_ids.append(token)
    return tokenizer.decode_bytes(new_ids).decode("utf-8", errors="replace")


__all__ = [
    "TrainSchedule", "AdamW", "GradientError", "EvalItem", "EvalTask",
    "TrainResult", "MultiChoiceResult", "seq_len_at", "lr_at", "clip_grad_norm",
    "train", "corpus_token_stream", "evaluate_ppl", "evaluate_multichoice",
    "generate", "METRICS_HEADER",
]
