import json
from pathlib import Path

import pytest

from jiang.cli import ConfigError, RunConfig, dispatch, plot_metrics

FIXTURES = Path(__file__).parent / "fixtures"


def write_train_setup(tmp_path, seed_line="seed=7"):
    corpus = ("tiny corpus for cli training runs. " * 40
              + "小模型的命令行训练语料。" * 20)
    (tmp_path / "corpus.txt").write_text(corpus, encoding="utf-8")
    config = "\n".join([
        "d_model=16", "n_layers=1", "n_heads=2", "max_seq_len=64",
        "ffn_ratio=1.0", "total_tokens=768", "batch_token_budget=128",
        "seq_len_initial=16", "seq_len_extended=32",
        "switch_threshold_tokens=384", "eval_every_steps=3",
        "corpus=corpus.txt", seed_line,
    ]) + "\n"
    (tmp_path / "run.cfg").write_text(config, encoding="utf-8")
    return tmp_path / "run.cfg"


class TestDispatch:
    def test_no_args_is_usage_error(self, capsys):
        assert dispatch([]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert dispatch(["frobnicate"]) == 1

    def test_runtime_error_exits_2(self, capsys):
        assert dispatch(["tok", "encode", "--vocab", "/nonexistent.jvoc", "hi"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_tok_encode_decode_round_trip(self, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_text("hello hello world 世界", encoding="utf-8")
        vocab_path = tmp_path / "v.jvoc"
        assert dispatch(["tok", "train", "--corpus", str(corpus), "--merges", "10",
                         "--out", str(vocab_path)]) == 0
        capsys.readouterr()
        assert dispatch(["tok", "encode", "--vocab", str(vocab_path), "hello 世界"]) == 0
        ids = capsys.readouterr().out.split()
        assert ids and all(t.isdigit() for t in ids)
        assert dispatch(["tok", "decode", "--vocab", str(vocab_path), *ids]) == 0
        assert capsys.readouterr().out.rstrip("\n") == "hello 世界"

    def test_tok_coverage_on_bundled_data(self, capsys):
        data = Path(__file__).parents[1] / "src" / "jiang" / "data"
        vocab = data.parent / "data"
        corpus = data / "desk_corpus_zh.txt"
        chars = data / "chinese_chars.txt"
        vocab_path = corpus.parent / "tmp_vocab.jvoc"
        try:
            assert dispatch(["tok", "train", "--corpus", str(corpus), "--merges", "0",
                             "--out", str(vocab_path)]) == 0
            assert dispatch(["tok", "extend", "--vocab", str(vocab_path), "--chars",
                             str(chars), "--out", str(vocab_path)]) == 0
            capsys.readouterr()
            assert dispatch(["tok", "coverage", "--vocab", str(vocab_path),
                             "--corpus", str(corpus)]) == 0
            assert float(capsys.readouterr().out.strip()) > 0.999
        finally:
            vocab_path.unlink(missing_ok=True)


class TestRunConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = write_train_setup(tmp_path)
        path.write_text(path.read_text() + "bogus_key=1\n")
        with pytest.raises(ConfigError):
            RunConfig.from_file(path)

    def test_seed_precedence(self, tmp_path, monkeypatch):
        path = write_train_setup(tmp_path, seed_line="seed=7")
        monkeypatch.setenv("JIANG_SEED", "99")
        assert RunConfig.from_file(path).seed == 7
        assert RunConfig.from_file(path, seed_override=3).seed == 3

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        path = write_train_setup(tmp_path, seed_line="# no seed")
        monkeypatch.setenv("JIANG_SEED", "41")
        assert RunConfig.from_file(path).seed == 41

    def test_vocab_size_defaults_to_tokenizer(self, tmp_path):
        path = write_train_setup(tmp_path)
        run = RunConfig.from_file(path)
        assert run.model.vocab_size == run.vocab.size == 257

    def test_missing_required_key(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("d_model=16\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "bad.cfg")


class TestTrainCli:
    def test_identical_seed_gives_byte_identical_outputs(self, tmp_path, capsys):
        config = write_train_setup(tmp_path)
        outputs = []
        for name in ("run1", "run2"):
            assert dispatch(["train", "--config", str(config), "--seed", "7",
                             "--out", str(tmp_path / name)]) == 0
            outputs.append(((tmp_path / name / "metrics.csv").read_bytes(),
                            (tmp_path / name / "train_manifest.json").read_bytes()))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]

    def test_different_seed_changes_metrics(self, tmp_path, capsys):
        config = write_train_setup(tmp_path)
        dispatch(["train", "--config", str(config), "--seed", "1", "--out", str(tmp_path / "a")])
        dispatch(["train", "--config", str(config), "--seed", "2", "--out", str(tmp_path / "b")])
        assert ((tmp_path / "a" / "metrics.csv").read_bytes()
                != (tmp_path / "b" / "metrics.csv").read_bytes())

    def test_eval_and_generate_round_trip(self, tmp_path, capsys):
        config = write_train_setup(tmp_path)
        out = tmp_path / "run"
        assert dispatch(["train", "--config", str(config), "--seed", "7",
                         "--out", str(out)]) == 0
        ckpt = out / "final.jckp"
        texts = tmp_path / "texts.txt"
        texts.write_text("tiny corpus for cli\nanother line\n", encoding="utf-8")
        capsys.readouterr()
        assert dispatch(["eval-ppl", "--ckpt", str(ckpt), "--texts", str(texts)]) == 0
        assert float(capsys.readouterr().out.strip()) > 1.0

        task = tmp_path / "task.jsonl"
        task.write_text(json.dumps({"context": "tiny corpus", "choices": [" for", " xq"],
                                    "answer": 0}) + "\n", encoding="utf-8")
        assert dispatch(["eval-mc", "--ckpt", str(ckpt), "--task", str(task)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload) == {"accuracy", "items", "ties"}

        assert dispatch(["generate", "--ckpt", str(ckpt), "--prompt", "tiny",
                         "--max-new", "8", "--seed", "3"]) == 0


class TestPipelineCli:
    def test_run_and_manifest_determinism(self, tmp_path, capsys):
        for name in ("o1", "o2"):
            assert dispatch(["pipeline", "run", "--input", str(FIXTURES),
                             "--output", str(tmp_path / name),
                             "--target-count", "5", "--seed", "11"]) == 0
        assert ((tmp_path / "o1" / "manifest.json").read_bytes()
                == (tmp_path / "o2" / "manifest.json").read_bytes())

    def test_stats_emits_one_json_per_doc(self, tmp_path, capsys):
        path = tmp_path / "docs.jsonl"
        path.write_text(json.dumps({"id": "a", "source": "s", "text": "hello 世界!"}) + "\n")
        assert dispatch(["pipeline", "stats", "--input", str(path)]) == 0
        payload = json.loads(capsys.readouterr().out.strip())
        assert payload["english_word_count"] == 1
        assert payload["chinese_char_count"] == 2

    def test_select_prints_ids(self, tmp_path, capsys):
        rows = [json.dumps({"id": f"d{i}", "source": "s", "text": f"document number {i} " * 5})
                for i in range(6)]
        path = tmp_path / "docs.jsonl"
        path.write_text("\n".join(rows) + "\n")
        assert dispatch(["pipeline", "select", "--input", str(path),
                         "--target-count", "3", "--seed", "0"]) == 0
        ids = capsys.readouterr().out.split()
        assert len(ids) == 3 and len(set(ids)) == 3

    def test_mix_writes_tokens_and_manifest(self, tmp_path, capsys):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        rows = [json.dumps({"id": "a", "source": "s1", "text": "aa bb"}),
                json.dumps({"id": "b", "source": "s2", "text": "cc dd"})]
        (in_dir / "docs.jsonl").write_text("\n".join(rows) + "\n")
        spec = tmp_path / "spec.cfg"
        spec.write_text("s1=0.5\ns2=0.5\n")
        out = tmp_path / "out"
        assert dispatch(["pipeline", "mix", "--input", str(in_dir), "--spec", str(spec),
                         "--total-tokens", "64", "--seed", "5", "--output", str(out)]) == 0
        tokens = (out / "tokens.txt").read_text().split()
        assert len(tokens) == 64
        manifest = json.loads((out / "mix_manifest.json").read_text())
        assert manifest["total_tokens"] == 64


class TestBenchAttention:
    def test_csv_output_with_backends(self, capsys):
        assert dispatch(["bench-attention", "--t-count", "64", "--heads", "2",
                         "--d-head", "16", "--block-q", "16", "--block-kv", "16",
                         "--seed", "0"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("backend,")
        names = [l.split(",")[0] for l in lines[1:]]
        assert "naive" in names and "tiled-python" in names


class TestPlot:
    def _csv(self, tmp_path, rows):
        path = tmp_path / "metrics.csv"
        path.write_text("\n".join(["step,tokens_seen,seq_len,loss,lr,eval_ppl,eval_acc"] + rows)
                        + "\n")
        return path

    def test_one_polyline_per_series(self, tmp_path):
        csv_path = self._csv(tmp_path, ["1,128,16,4.2,0.0003,61.5,"])
        svg_path = tmp_path / "plot.svg"
        plot_metrics(csv_path, svg_path)
        svg = svg_path.read_text()
        assert svg.count("<polyline") == 2  # loss and eval_ppl

    def test_header_only_is_error_and_no_file(self, tmp_path):
        csv_path = self._csv(tmp_path, [])
        svg_path = tmp_path / "plot.svg"
        with pytest.raises(ValueError):
            plot_metrics(csv_path, svg_path)
        assert not svg_path.exists()

    def test_malformed_row_names_line(self, tmp_path):
        csv_path = self._csv(tmp_path, ["1,128,16,4.2,0.0003,,", "2,256,16,not_a_number,0.0003,,"])
        with pytest.raises(ValueError, match="line 3"):
            plot_metrics(csv_path, tmp_path / "plot.svg")

    def test_byte_stable(self, tmp_path):
        csv_path = self._csv(tmp_path, ["1,128,16,4.2,0.0003,61.5,",
                                        "2,256,16,3.9,0.0003,,"])
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        plot_metrics(csv_path, a)
        plot_metrics(csv_path, b)
        assert a.read_bytes() == b.read_bytes()

    def test_cli_plot_subcommand(self, tmp_path, capsys):
        csv_path = self._csv(tmp_path, ["1,128,16,4.2,0.0003,61.5,"])
        out = tmp_path / "out.svg"
        assert dispatch(["plot", "--csv", str(csv_path), "--out", str(out)]) == 0
        assert out.exists()
