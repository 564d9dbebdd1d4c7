"""Single command-line entry point.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 runtime
error (diagnostic on stderr). All randomness is routed through --seed,
falling back to the config file and then the JIANG_SEED environment
variable. Every subcommand is deterministic given flags and seed, and
writes only to its declared output paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flash_attention as fa
from .data_pipeline import (
    DiversityConfig, FilterRules, HashedTrigramEmbedder, MixtureSpec,
    compute_stats, config_hash, diversity_select, mixture_sample, pipeline_run,
    read_jsonl,
)
from .model import ModelConfig, init_weights, load_weights
from .tokenizer import Vocabulary, coverage, extend_vocab, train_bpe
from .train_eval import (
    EvalTask, TrainSchedule, corpus_token_stream, evaluate_multichoice,
    evaluate_ppl, generate, train,
)


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# run configuration (flat key=value files)

_MODEL_KEYS = {
    "d_model": int, "n_layers": int, "n_heads": int, "vocab_size": int,
    "ffn_ratio": float, "max_seq_len": int, "rope_base": float,
    "rmsnorm_eps": float, "bias_policy": str, "gated": bool, "tied_head": bool,
}
_SCHEDULE_KEYS = {
    "total_tokens": int, "batch_token_budget": int, "seq_len_initial": int,
    "seq_len_extended": int, "switch_threshold_tokens": int, "lr": float,
    "beta1": float, "beta2": float, "weight_decay": float, "grad_clip": float,
    "eval_every_steps": int, "warmup_frac": float,
}
_PATH_KEYS = {"corpus": str, "vocab": str, "eval_texts": str, "eval_task": str}
_OTHER_KEYS = {"seed": int}


def _parse_value(key: str, raw: str, kind):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


@dataclass
class RunConfig:
    """Validated view over model, schedule, paths, and seed; hashed into
    every manifest so a run can be traced back to its exact inputs."""

    model: ModelConfig
    schedule: TrainSchedule
    corpus: Path
    vocab_path: Path | None
    eval_texts: Path | None
    eval_task: Path | None
    seed: int
    config_hash: str
    vocab: Vocabulary

    @classmethod
    def from_file(cls, path, seed_override: int | None = None) -> "RunConfig":
        known = {**_MODEL_KEYS, **_SCHEDULE_KEYS, **_PATH_KEYS, **_OTHER_KEYS}
        values: dict = {}
        base = Path(path).parent
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in known:
                raise ConfigError(f"{path}:{n}: unknown or malformed entry {line!r}")
            values[key] = _parse_value(key, raw, known[key])
        if "corpus" not in values:
            raise ConfigError(f"{path}: missing required key 'corpus'")

        vocab_path = base / values["vocab"] if "vocab" in values else None
        if vocab_path is not None:
            vocab = Vocabulary.load(vocab_path)
        else:
            vocab = Vocabulary(())  # byte-level with the end-of-text special

        model_kwargs = {k: values[k] for k in _MODEL_KEYS if k in values}
        if model_kwargs.get("vocab_size", 0) == 0:
            model_kwargs["vocab_size"] = vocab.size
        for required in ("d_model", "n_layers", "n_heads"):
            if required not in model_kwargs:
                raise ConfigError(f"{path}: missing required key {required!r}")
        model = ModelConfig(**model_kwargs)
        if model.vocab_size < vocab.size:
            raise ConfigError(
                f"vocab_size {model.vocab_size} smaller than vocabulary ({vocab.size} tokens)")

        sched_kwargs = {k: values[k] for k in _SCHEDULE_KEYS if k in values and k not in ("beta1", "beta2")}
        if "beta1" in values or "beta2" in values:
            sched_kwargs["betas"] = (values.get("beta1", 0.9), values.get("beta2", 0.95))
        if "total_tokens" not in sched_kwargs:
            raise ConfigError(f"{path}: missing required key 'total_tokens'")
        schedule = TrainSchedule(**sched_kwargs)

        seed = seed_override if seed_override is not None else values.get("seed")
        if seed is None:
            seed = int(os.environ.get("JIANG_SEED", "0"))

        digest_payload = {k: str(v) for k, v in sorted(values.items())}
        digest_payload["resolved_seed"] = str(seed)
        return cls(
            model=model,
            schedule=schedule,
            corpus=base / values["corpus"],
            vocab_path=vocab_path,
            eval_texts=base / values["eval_texts"] if "eval_texts" in values else None,
            eval_task=base / values["eval_task"] if "eval_task" in values else None,
            seed=seed,
            config_hash=config_hash(digest_payload),
            vocab=vocab,
        )


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("JIANG_SEED", "0"))


# ---------------------------------------------------------------------------
# SVG metrics plot

_SVG_W, _SVG_H = 720, 480
_MARGIN = 60
_SERIES_COLORS = {"loss": "#1f77b4", "eval_ppl": "#d62728"}


def _scaled(points, lo_x, hi_x, lo_y, hi_y):
    span_x = max(hi_x - lo_x, 1e-12)
    span_y = max(hi_y - lo_y, 1e-12)
    for x, y in points:
        px = _MARGIN + (x - lo_x) / span_x * (_SVG_W - 2 * _MARGIN)
        py = _SVG_H - _MARGIN - (y - lo_y) / span_y * (_SVG_H - 2 * _MARGIN)
        yield f"{px:.2f},{py:.2f}"


def plot_metrics(csv_path, svg_path) -> None:
    """Self-contained SVG line plot of loss (and the evaluation metric
    when present) against the step counter; byte-stable for equal input."""
    lines = Path(csv_path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{csv_path}: empty file")
    header = lines[0].split(",")
    try:
        step_col = header.index("step")
        loss_col = header.index("loss")
        ppl_col = header.index("eval_ppl") if "eval_ppl" in header else None
    except ValueError:
        raise ValueError(f"{csv_path}: line 1: header must name 'step' and 'loss'") from None

    series: dict[str, list[tuple[float, float]]] = {"loss": []}
    if ppl_col is not None:
        series["eval_ppl"] = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            step = float(cells[step_col])
            series["loss"].append((step, float(cells[loss_col])))
            if ppl_col is not None and len(cells) > ppl_col and cells[ppl_col]:
                series["eval_ppl"].append((step, float(cells[ppl_col])))
        except (ValueError, IndexError):
            raise ValueError(f"{csv_path}: line {n}: malformed row {line!r}") from None
    series = {name: pts for name, pts in series.items() if pts}
    if not series.get("loss"):
        raise ValueError(f"{csv_path}: no data rows to plot")

    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    lo_x, hi_x, lo_y, hi_y = min(xs), max(xs), min(ys), max(ys)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_SVG_W // 2}" y="{_SVG_H - 15}" text-anchor="middle" '
        f'font-size="13">step ({lo_x:.0f} .. {hi_x:.0f})</text>',
        f'<text x="15" y="{_SVG_H // 2}" font-size="13" '
        f'transform="rotate(-90 15 {_SVG_H // 2})" text-anchor="middle">'
        f'value ({lo_y:.3f} .. {hi_y:.3f})</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        color = _SERIES_COLORS.get(name, "#2ca02c")
        coords = " ".join(_scaled(pts, lo_x, hi_x, lo_y, hi_y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{_SVG_W - _MARGIN - 90}" y="{_MARGIN + 18 * i}" '
                     f'font-size="13" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(svg_path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommand handlers

def _cmd_tok(args) -> int:
    if args.tok_cmd == "train":
        corpus = Path(args.corpus).read_text(encoding="utf-8")
        vocab = train_bpe(corpus, args.merges)
        vocab.save(args.out)
        print(f"trained {len(vocab.merges)} merges, vocabulary size {vocab.size}")
    elif args.tok_cmd == "extend":
        vocab = Vocabulary.load(args.vocab)
        chars = [line.strip() for line in Path(args.chars).read_text(encoding="utf-8").splitlines()
                 if line.strip()]
        extended = extend_vocab(vocab, chars)
        extended.save(args.out)
        print(f"added {extended.size - vocab.size} tokens, vocabulary size {extended.size}")
    elif args.tok_cmd == "encode":
        vocab = Vocabulary.load(args.vocab)
        print(" ".join(str(i) for i in vocab.encode(args.text)))
    elif args.tok_cmd == "decode":
        vocab = Vocabulary.load(args.vocab)
        print(vocab.decode([int(i) for i in args.ids]))
    elif args.tok_cmd == "coverage":
        vocab = Vocabulary.load(args.vocab)
        corpus = Path(args.corpus).read_text(encoding="utf-8")
        print(f"{coverage(vocab, corpus):.6f}")
    return 0


def _cmd_pipeline(args) -> int:
    seed = _resolve_seed(args)
    rules = FilterRules.load(args.rules) if args.rules else FilterRules.default()
    if args.pipe_cmd == "run":
        cfg = DiversityConfig(target_count=args.target_count,
                              candidate_quantile=args.quantile, seed=seed)
        manifest = pipeline_run(args.input, rules, cfg, args.output)
        print(json.dumps({"kept": manifest["kept"], "rejected": manifest["rejected"]},
                         sort_keys=True))
    elif args.pipe_cmd == "stats":
        for doc in read_jsonl(args.input):
            stats = compute_stats(doc.text)
            print(json.dumps({"id": doc.id, "english_word_count": stats.english_word_count,
                              "chinese_char_count": stats.chinese_char_count,
                              "char_length": stats.char_length,
                              "max_punctuationless_run": stats.max_punctuationless_run},
                             sort_keys=True))
    elif args.pipe_cmd == "select":
        docs = list(read_jsonl(args.input))
        embedder = HashedTrigramEmbedder()
        embedded = [(doc.id, embedder(doc.text)) for doc in docs]
        cfg = DiversityConfig(target_count=args.target_count,
                              candidate_quantile=args.quantile, seed=seed)
        for doc_id in diversity_select(embedded, cfg):
            print(doc_id)
    elif args.pipe_cmd == "mix":
        spec = MixtureSpec.load(args.spec) if args.spec else MixtureSpec.table_defaults()
        vocab = Vocabulary.load(args.vocab) if args.vocab else Vocabulary(())
        sources: dict[str, list[str]] = {}
        for path in sorted(Path(args.input).glob("*.jsonl")):
            for doc in read_jsonl(path):
                sources.setdefault(doc.source, []).append(doc.text)
        draw_counts: Counter = Counter()
        tokens = list(mixture_sample(sources, spec, vocab, args.total_tokens, seed,
                                     draw_counts=draw_counts))
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "tokens.txt").write_text(
            "\n".join(str(t) for t in tokens) + "\n", encoding="utf-8")
        manifest = {
            "total_tokens": len(tokens),
            "draws": dict(sorted(draw_counts.items())),
            "seed": seed,
            "config_hash": config_hash({"spec": spec.proportions, "seed": seed,
                                        "total_tokens": args.total_tokens}),
        }
        (out_dir / "mix_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(json.dumps(manifest["draws"], sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    run = RunConfig.from_file(args.config, seed_override=args.seed)
    weights = init_weights(run.model, seed=run.seed)
    corpus = run.corpus.read_text(encoding="utf-8")
    stream_factory = corpus_token_stream(corpus, run.vocab)
    eval_texts = None
    if run.eval_texts is not None:
        eval_texts = [l for l in run.eval_texts.read_text(encoding="utf-8").splitlines() if l]
    eval_task = EvalTask.load_jsonl(run.eval_task) if run.eval_task is not None else None
    out_dir = Path(args.out)
    result = train(weights, run.vocab, stream_factory, run.schedule, out_dir,
                   eval_texts=eval_texts, eval_task=eval_task, resume_from=args.resume)
    manifest = {
        "steps": result.steps,
        "tokens_seen": result.tokens_seen,
        "final_loss": f"{result.losses[-1]:.6f}" if result.losses else "",
        "seed": run.seed,
        "config_hash": run.config_hash,
    }
    (out_dir / "train_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"trained {result.steps} steps, {result.tokens_seen} tokens; "
          f"metrics at {result.metrics_path}")
    return 0


def _load_model_and_vocab(args):
    weights, _, _ = load_weights(args.ckpt)
    vocab = Vocabulary.load(args.vocab) if args.vocab else Vocabulary(())
    return weights, vocab


def _cmd_eval_ppl(args) -> int:
    weights, vocab = _load_model_and_vocab(args)
    texts = [l for l in Path(args.texts).read_text(encoding="utf-8").splitlines() if l]
    print(f"{evaluate_ppl(weights, vocab, texts):.6f}")
    return 0


def _cmd_eval_mc(args) -> int:
    weights, vocab = _load_model_and_vocab(args)
    task = EvalTask.load_jsonl(args.task)
    result = evaluate_multichoice(weights, vocab, task, normalization=args.normalization)
    print(json.dumps({"accuracy": result.accuracy, "items": len(task.items),
                      "ties": result.ties}, sort_keys=True))
    return 0


def _cmd_generate(args) -> int:
    weights, vocab = _load_model_and_vocab(args)
    text = generate(weights, vocab, args.prompt, max_new=args.max_new,
                    strategy=args.strategy, temperature=args.temperature,
                    top_k=args.top_k, seed=_resolve_seed(args))
    print(text)
    return 0


def _cmd_bench_attention(args) -> int:
    rng = np.random.default_rng(_resolve_seed(args))
    dtype = np.float32 if args.dtype == "f32" else np.float64
    shape = (args.heads, args.t_count, args.d_head)
    q, k, v = (rng.normal(size=shape).astype(dtype) for _ in range(3))
    tiles = fa.TileConfig(args.block_q, args.block_kv)
    est = fa.memory_estimate(args.t_count, args.d_head, args.heads, tiles,
                             elem_size=dtype().itemsize)

    def timed(fn):
        t0 = time.perf_counter()
        out = fn()
        return out, time.perf_counter() - t0

    rows = []
    _, naive_s = timed(lambda: fa.naive_attention(q, k, v, causal=args.causal))
    rows.append(("naive", est["naive_bytes"], naive_s))
    _, py_s = timed(lambda: fa.tiled_attention(q, k, v, causal=args.causal,
                                               tiles=tiles, backend="python"))
    rows.append(("tiled-python", est["tiled_bytes"], py_s))
    if fa.HAVE_COMPILED:
        _, c_s = timed(lambda: fa.tiled_attention(q, k, v, causal=args.causal,
                                                  tiles=tiles, backend="compiled"))
        rows.append(("tiled-compiled", est["tiled_bytes"], c_s))
    print("backend,T,heads,d_head,block_q,block_kv,aux_bytes,seconds")
    for name, aux, seconds in rows:
        print(f"{name},{args.t_count},{args.heads},{args.d_head},"
              f"{tiles.block_q},{tiles.block_kv},{aux},{seconds:.6f}")
    return 0


def _cmd_plot(args) -> int:
    plot_metrics(args.csv, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="jiang", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    tok = sub.add_parser("tok", help="tokenizer operations")
    tok_sub = tok.add_subparsers(dest="tok_cmd", required=True)
    p = tok_sub.add_parser("train")
    p.add_argument("--corpus", required=True)
    p.add_argument("--merges", type=int, required=True)
    p.add_argument("--out", required=True)
    p = tok_sub.add_parser("extend")
    p.add_argument("--vocab", required=True)
    p.add_argument("--chars", required=True)
    p.add_argument("--out", required=True)
    p = tok_sub.add_parser("encode")
    p.add_argument("--vocab", required=True)
    p.add_argument("text")
    p = tok_sub.add_parser("decode")
    p.add_argument("--vocab", required=True)
    p.add_argument("ids", nargs="+")
    p = tok_sub.add_parser("coverage")
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    tok.set_defaults(func=_cmd_tok)

    pipe = sub.add_parser("pipeline", help="corpus pipeline operations")
    pipe_sub = pipe.add_subparsers(dest="pipe_cmd", required=True)
    p = pipe_sub.add_parser("run")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--rules")
    p.add_argument("--target-count", type=int, required=True)
    p.add_argument("--quantile", type=float, default=0.10)
    p.add_argument("--seed", type=int)
    p = pipe_sub.add_parser("stats")
    p.add_argument("--input", required=True)
    p.add_argument("--rules")
    p.add_argument("--seed", type=int)
    p = pipe_sub.add_parser("select")
    p.add_argument("--input", required=True)
    p.add_argument("--target-count", type=int, required=True)
    p.add_argument("--quantile", type=float, default=0.10)
    p.add_argument("--rules")
    p.add_argument("--seed", type=int)
    p = pipe_sub.add_parser("mix")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--spec")
    p.add_argument("--vocab")
    p.add_argument("--total-tokens", type=int, required=True)
    p.add_argument("--rules")
    p.add_argument("--seed", type=int)
    pipe.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-ppl", help="perplexity of a text set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab")
    p.add_argument("--texts", required=True)
    p.set_defaults(func=_cmd_eval_ppl)

    p = sub.add_parser("eval-mc", help="multiple-choice log-likelihood accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab")
    p.add_argument("--task", required=True)
    p.add_argument("--normalization", choices=("none", "per_char"), default="none")
    p.set_defaults(func=_cmd_eval_mc)

    p = sub.add_parser("generate", help="continue a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--strategy", choices=("greedy", "temperature", "top_k"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("bench-attention", help="naive vs tiled attention benchmark (CSV)")
    p.add_argument("--t-count", type=int, default=512)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-head", type=int, default=32)
    p.add_argument("--block-q", type=int, default=64)
    p.add_argument("--block-kv", type=int, default=64)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_bench_attention)

    p = sub.add_parser("plot", help="render a metrics CSV to SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except Exception as e:  # runtime failure: diagnostic, exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


__all__ = ["dispatch", "main", "plot_metrics", "RunConfig", "ConfigError", "UsageError"]
