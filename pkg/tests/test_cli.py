"""End-to-end command-line tests (driven in-process through main())."""

import json

import numpy as np
import pytest

from codec_infill.checkpoint import load_checkpoint, save_checkpoint
from codec_infill.cli import main
from codec_infill.evaluate import EvalRecord, save_manifest, synthesize_manifest
from codec_infill.model import ModelConfig, new_model
from codec_infill.synthcodec import ToyCodecConfig, gen_corpus, load_corpus, write_corpus
from codec_infill.tokens import (
    CodecMatrix,
    TokenDumpRecord,
    read_token_dump,
    write_token_dump,
)

CODEC = ToyCodecConfig()


def small_model_config():
    return ModelConfig(
        num_layers=1,
        hidden_dim=32,
        ffn_dim=64,
        num_heads=2,
        num_codebooks=CODEC.num_codebooks,
        codebook_sizes=CODEC.codebook_sizes,
        text_vocab_size=CODEC.alphabet_size,
        max_positions=512,
        loss_weights=(5.0, 1.0, 0.5, 0.1),
        dtype="float32",
    )


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus"
    write_corpus(path, gen_corpus(20, (5, 9), CODEC, seed=0, num_validation=4), CODEC)
    return path


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.bin"
    save_checkpoint(path, new_model(small_model_config(), seed=0), None)
    return path


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


class TestGenData:
    def test_default_counts(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "gen.json", {"corpus": {"min_symbols": 5, "max_symbols": 8}})
        code = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "corpus")])
        assert code == 0
        assert "1000 train / 100 validation" in capsys.readouterr().out
        utts, _ = load_corpus(tmp_path / "corpus")
        assert len(utts) == 1100

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_json(
            tmp_path / "gen.json",
            {"corpus": {"num_utterances": 12, "num_validation": 2, "min_symbols": 5, "max_symbols": 6}},
        )
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        for name in ("manifest.jsonl", "tokens.jsonl", "codec_config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_invalid_field_named_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "gen.json", {"codec": {"frames_per_sym": 4}})
        code = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "frames_per_sym" in capsys.readouterr().err

    def test_invalid_value_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "gen.json", {"codec": {"frames_per_symbol": 0}})
        code = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "codec" in capsys.readouterr().err


class TestTrainCommand:
    def train_config(self, corpus_dir, steps=6):
        return {
            "data_dir": str(corpus_dir),
            "model": {
                "num_layers": 1,
                "hidden_dim": 32,
                "ffn_dim": 64,
                "num_heads": 2,
                "max_positions": 512,
                "dtype": "float32",
            },
            "scheduler": {"base_lr": 0.002},
            "train": {"batch_frame_budget": 512, "total_steps": steps, "checkpoint_every": 5},
        }

    def test_smoke_run_writes_checkpoint(self, tmp_path, corpus_dir):
        cfg = write_json(tmp_path / "train.json", self.train_config(corpus_dir))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert code == 0
        assert (tmp_path / "run" / "ckpt_final.bin").exists()
        assert (tmp_path / "run" / "ckpt_000005.bin").exists()
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 6

    def test_resume_continues_step_counter(self, tmp_path, corpus_dir):
        cfg = write_json(tmp_path / "train.json", self.train_config(corpus_dir, steps=4))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        state, _ = load_checkpoint(tmp_path / "run" / "ckpt_final.bin")
        assert state.step == 4
        cfg2 = write_json(tmp_path / "train2.json", self.train_config(corpus_dir, steps=7))
        code = main(
            [
                "train", "--config", str(cfg2), "--out", str(tmp_path / "run2"),
                "--resume", str(tmp_path / "run" / "ckpt_final.bin"),
            ]
        )
        assert code == 0
        resumed, _ = load_checkpoint(tmp_path / "run2" / "ckpt_final.bin")
        assert resumed.step == 7

    def test_nan_abort_exit_4(self, tmp_path, corpus_dir, capsys):
        state = new_model(
            ModelConfig(
                num_layers=1, hidden_dim=32, ffn_dim=64, num_heads=2,
                max_positions=512, dtype="float32",
                num_codebooks=CODEC.num_codebooks, codebook_sizes=CODEC.codebook_sizes,
                text_vocab_size=CODEC.alphabet_size,
            ),
            seed=0,
        )
        state.params["text_emb"][:] = np.nan
        poisoned = tmp_path / "poisoned.bin"
        save_checkpoint(poisoned, state, None)
        cfg = write_json(tmp_path / "train.json", self.train_config(corpus_dir, steps=3))
        code = main(
            ["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--resume", str(poisoned)]
        )
        assert code == 4
        assert "utt" in capsys.readouterr().err


class TestEditCommand:
    def test_identity_edit_round_trips_tokens(self, tmp_path, corpus_dir, tiny_checkpoint):
        utts, _ = load_corpus(corpus_dir)
        utt = utts[0]
        request = write_json(
            tmp_path / "request.json",
            {"id": utt.id, "corpus_dir": str(corpus_dir), "target": utt.transcript},
        )
        code = main(["edit", str(tiny_checkpoint), str(request), "--out", str(tmp_path / "edit")])
        assert code == 0
        records = read_token_dump(tmp_path / "edit" / "edited_tokens.jsonl")
        assert np.array_equal(records[0].matrix.frames, utt.tokens.frames)
        report = json.loads((tmp_path / "edit" / "report.json").read_text())
        assert report["identity"] is True
        assert (tmp_path / "edit" / "edited.wav").exists()

    def test_substitution_reports_ten_candidates(self, tmp_path, corpus_dir, tiny_checkpoint):
        utts, _ = load_corpus(corpus_dir)
        utt = utts[1]
        target = list(utt.transcript)
        target[2] = (target[2] + 1) % CODEC.alphabet_size
        request = write_json(
            tmp_path / "request.json",
            {
                "id": utt.id,
                "corpus_dir": str(corpus_dir),
                "target": target,
                "sampling": {"max_generated_steps": 6, "seed": 3},
            },
        )
        code = main(["edit", str(tiny_checkpoint), str(request), "--out", str(tmp_path / "edit")])
        assert code == 0
        report = json.loads((tmp_path / "edit" / "report.json").read_text())
        assert len(report["candidate_lengths"]) == 10
        assert 0 <= report["chosen_index"] < 10
        assert [c["epsilon"] for c in report["candidates"]] == [
            0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.11, 0.12, 0.13, 0.14
        ]


class TestTtsCommand:
    def test_prompt_preserved_and_five_candidates(self, tmp_path, corpus_dir, tiny_checkpoint):
        utts, _ = load_corpus(corpus_dir)
        utt = utts[2]
        half = len(utt.transcript) // 2
        frames = utt.tokens.frames[: CODEC.frames_per_symbol * half]
        dump = tmp_path / "prompt.jsonl"
        write_token_dump(
            dump,
            [TokenDumpRecord(utt.id, CodecMatrix(frames, CODEC.frame_rate, CODEC.codebook_sizes))],
        )
        prompt_text = " ".join(str(s) for s in utt.transcript[:half])
        target_text = " ".join(str(s) for s in utt.transcript[half:])
        code = main(
            [
                "tts", str(tiny_checkpoint), str(dump), prompt_text, target_text,
                "--codec-config", str(corpus_dir / "codec_config.json"),
                "--out", str(tmp_path / "tts"),
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / "tts" / "report.json").read_text())
        assert len(report["candidate_lengths"]) == 5
        assert report["chosen_index"] == int(np.argmin(report["candidate_lengths"]))
        out = read_token_dump(tmp_path / "tts" / "tts_tokens.jsonl")[0].matrix
        assert np.array_equal(out.frames[: len(frames)], frames)


class TestRearrangeCommand:
    def test_prints_canonical_layout(self, tmp_path, capsys):
        frames = np.array([[10 * i + c for c in range(4)] for i in range(1, 7)])
        dump = tmp_path / "six.jsonl"
        write_token_dump(
            dump, [TokenDumpRecord("six", CodecMatrix(frames, 50, (2048,) * 4))]
        )
        code = main(["rearrange", str(dump), "--spans", "1:4", "--roundtrip"])
        assert code == 0
        out = capsys.readouterr().out
        y_line = next(line for line in out.splitlines() if line.startswith("Y:"))
        assert y_line == (
            "Y: (10,11,12,13) <M1> (50,51,52,53) (60,61,62,63) EOU "
            "<M1> (20,21,22,23) (30,31,32,33) (40,41,42,43) EOS"
        )
        assert "Z:" in out
        assert "round-trip OK" in out

    def test_single_codebook_stack_unchanged(self, tmp_path, capsys):
        frames = np.arange(3).reshape(3, 1)
        dump = tmp_path / "k1.jsonl"
        write_token_dump(dump, [TokenDumpRecord("k1", CodecMatrix(frames, 50, (8,)))])
        code = main(["rearrange", str(dump)])
        assert code == 0
        out = capsys.readouterr().out
        y_line = next(line for line in out.splitlines() if line.startswith("Y:"))
        z_line = next(line for line in out.splitlines() if line.startswith("Z:"))
        assert y_line[2:] == z_line[2:]


def dedupe_by_utterance(records):
    """Re-key manifest records to their utterance ids, dropping collisions."""
    seen = set()
    out = []
    for r in records:
        r.id = r.id.split("_", 1)[1]
        if r.id not in seen:
            seen.add(r.id)
            out.append(r)
    return out


class TestEvalCommand:
    def test_identity_manifest_zero_everywhere_and_counts(self, tmp_path, tiny_checkpoint):
        corpus = gen_corpus(10, (5, 9), CODEC, seed=22)
        corpus_path = tmp_path / "corpus"
        write_corpus(corpus_path, corpus, CODEC)
        rng = np.random.default_rng(23)
        records = dedupe_by_utterance(synthesize_manifest(corpus, CODEC, rng, 4, identity=True))
        manifest = tmp_path / "manifest.jsonl"
        save_manifest(manifest, records)
        code = main(
            ["eval", str(tiny_checkpoint), str(corpus_path), str(manifest), "--out", str(tmp_path / "ev")]
        )
        assert code == 0
        summary = json.loads((tmp_path / "ev" / "eval_summary.json").read_text())
        strata = summary["strata"]
        assert strata["identity"]["count"] == len(records)
        for row in strata.values():
            assert row["mean_ser"] == 0.0
            assert row["mean_mcd"] == 0.0

    def test_corruption_raises_only_its_stratum(self, tmp_path, tiny_checkpoint):
        corpus = gen_corpus(10, (5, 9), CODEC, seed=24)
        corpus_path_a = tmp_path / "clean"
        corpus_path_b = tmp_path / "corrupt"
        write_corpus(corpus_path_a, corpus, CODEC)
        rng = np.random.default_rng(25)
        identity = synthesize_manifest(corpus, CODEC, rng, 2, identity=True)
        edits = synthesize_manifest(corpus, CODEC, rng, 2, max_span_words=2)
        records = dedupe_by_utterance(identity + edits)
        manifest = tmp_path / "manifest.jsonl"
        save_manifest(manifest, records)

        # corrupted copy: shift one identity record's tokens
        corrupted_id = next(r.id for r in records if not r.edit_types)
        mutated = []
        for u in corpus:
            if u.id == corrupted_id:
                frames = (u.tokens.frames + 101) % CODEC.codebook_size
                u = type(u)(
                    u.id, u.transcript,
                    CodecMatrix(frames, CODEC.frame_rate, CODEC.codebook_sizes),
                    u.alignment, u.split,
                )
            mutated.append(u)
        write_corpus(corpus_path_b, mutated, CODEC)

        args_tail = [
            str(manifest), "--set", "sampling.max_generated_steps=4", "--set", "sampling.seed=11",
        ]
        assert main(["eval", str(tiny_checkpoint), str(corpus_path_a), *args_tail, "--out", str(tmp_path / "a")]) == 0
        assert main(["eval", str(tiny_checkpoint), str(corpus_path_b), *args_tail, "--out", str(tmp_path / "b")]) == 0
        clean = json.loads((tmp_path / "a" / "eval_summary.json").read_text())["strata"]
        dirty = json.loads((tmp_path / "b" / "eval_summary.json").read_text())["strata"]
        assert dirty["identity"]["mean_ser"] > clean["identity"]["mean_ser"]
        for key in clean:
            if key in ("identity", "all|total"):
                continue
            assert dirty[key] == clean[key]  # untouched strata are bit-identical

    def test_missing_dump_skipped(self, tmp_path, tiny_checkpoint):
        corpus = gen_corpus(6, (5, 8), CODEC, seed=26)
        corpus_path = tmp_path / "corpus"
        write_corpus(corpus_path, corpus, CODEC)
        records = [
            EvalRecord("missing00", [1, 2, 3], [1, 2, 3]),
            EvalRecord(corpus[0].id, corpus[0].transcript, corpus[0].transcript),
        ]
        manifest = tmp_path / "manifest.jsonl"
        save_manifest(manifest, records)
        code = main(
            ["eval", str(tiny_checkpoint), str(corpus_path), str(manifest), "--out", str(tmp_path / "ev")]
        )
        assert code == 0
        summary = json.loads((tmp_path / "ev" / "eval_summary.json").read_text())
        assert summary["skipped"] == 1
