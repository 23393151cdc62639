import json
import logging

import pytest

from cli import build_parser, parse_and_dispatch, parse_variants, UsageError
from config import save_config
from gradcheck import tiny_run_config
from metrics import EVAL_SEED_XOR

SMALL = {
    "search_size": 32, "template_size": 16, "feature_dim": 8, "n_points": 4, "hidden_dim": 16,
    "top_k": 8, "scenes_per_epoch": 2, "batch_size": 2, "epochs": 1,
    "eval_sequences": 1, "sequence_length": 3,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


class TestParsing:

    def test_missing_command(self):
        assert parse_and_dispatch([]) == 2

    def test_train_needs_config(self, tmp_path):
        assert parse_and_dispatch(["train", "--out", str(tmp_path)]) == 2

    def test_help_exits_cleanly(self):
        assert parse_and_dispatch(["--help"]) == 0

    def test_unknown_assigner(self):
        assert parse_and_dispatch(["assign", "--assigner", "atss", "--scene-seed", "1"]) == 2

    def test_parse_variants(self):
        assert parse_variants("cd, iv+lead", None) == [
            ("cd", {"strategy": "cd", "leading": False}),
            ("iv+lead", {"strategy": "iv", "leading": True}),
        ]

    def test_parse_variants_needs_exactly_one_source(self):
        with pytest.raises(UsageError):
            parse_variants(None, None)
        with pytest.raises(UsageError):
            parse_variants("iv", "variants.json")

    def test_parser_defaults(self):
        args = build_parser().parse_args(["eval", "--checkpoint", "c.json", "--out", "o"])
        assert args.sequences == 64 and args.seed == 42 and not args.no_docx


class TestCommands:

    def test_missing_config_file(self, tmp_path):
        code = parse_and_dispatch(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == 2

    def test_bad_config_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"learning_rate": 1.0}))
        assert parse_and_dispatch(["train", "--config", str(path), "--out", str(tmp_path / "out")]) == 2

    def test_train_then_eval(self, config_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert parse_and_dispatch(["train", "--config", str(config_file), "--out", str(out),
                                   "--dump-scenes", str(tmp_path / "scenes")]) == 0
        assert (out / "metrics.csv").exists()
        assert (tmp_path / "scenes" / "scenes.json").exists()

        ev = tmp_path / "eval"
        assert parse_and_dispatch(["eval", "--checkpoint", str(out / "checkpoint.json"), "--sequences", "1",
                                   "--out", str(ev)]) == 0
        assert (ev / "eval_report.json").exists()
        assert (ev / "eval_report.docx").exists()

    def test_eval_records_its_config(self, config_file, tmp_path, caplog):
        run = tmp_path / "run"
        assert parse_and_dispatch(["train", "--config", str(config_file), "--out", str(run)]) == 0
        ev = tmp_path / "eval"
        checkpoint = str(run / "checkpoint.json")
        with caplog.at_level(logging.INFO):
            assert parse_and_dispatch(["eval", "--checkpoint", checkpoint, "--sequences", "2", "--seed", "9",
                                       "--out", str(ev), "--no-docx"]) == 0
        recorded = json.loads((ev / "eval_config.json").read_text())
        assert recorded == {"checkpoint": checkpoint, "sequences": 2, "seed": 9, "eval_seed": 9 ^ EVAL_SEED_XOR,
                            "search_size": 32, "template_size": 16, "sequence_length": 3}
        assert "Resolved eval config" in caplog.text
        assert json.loads((ev / "eval_report.json").read_text())["n_sequences"] == 2

    def test_eval_rejects_zero_sequences(self, tmp_path):
        code = parse_and_dispatch(["eval", "--checkpoint", "c.json", "--sequences", "0", "--out", str(tmp_path)])
        assert code == 2

    def test_assign_is_deterministic(self, capsys):
        argv = ["assign", "--assigner", "iv", "--scene-seed", "4", "--leading", "--top-k", "8"]
        assert parse_and_dispatch(argv) == 0
        first = json.loads(capsys.readouterr().out)
        assert parse_and_dispatch(argv) == 0
        second = json.loads(capsys.readouterr().out)
        assert first == second
        assert first["leading"] is True and first["top_k"] == 8

    def test_assign_dump(self, config_file, tmp_path, capsys):
        dump = tmp_path / "dump"
        code = parse_and_dispatch(["assign", "--assigner", "cd", "--scene-seed", "2", "--config", str(config_file),
                                   "--dump", str(dump)])
        assert code == 0
        assert (dump / "search.pgm").exists()
        assert (dump / "target_map.pgm").exists()

    def test_ablate(self, config_file, tmp_path, capsys):
        out = tmp_path / "ablate"
        code = parse_and_dispatch(["ablate", "--config", str(config_file), "--variants", "one2one,iv+lead",
                                   "--out", str(out)])
        assert code == 0
        assert (out / "ablation.csv").exists()
        assert (out / "ablation_report.docx").exists()

    def test_ablate_needs_variants(self, config_file, tmp_path):
        assert parse_and_dispatch(["ablate", "--config", str(config_file), "--out", str(tmp_path)]) == 2

    def test_train_saves_resolved_seed(self, tmp_path):
        path = save_config(tiny_run_config(), tmp_path / "tiny.json")
        out = tmp_path / "run"
        assert parse_and_dispatch(["train", "--config", str(path), "--out", str(out), "--seed", "17"]) == 0
        assert json.loads((out / "config.json").read_text())["seed"] == 17
