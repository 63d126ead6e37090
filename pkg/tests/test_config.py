import pytest

from literec.config import ENV_VAR, RunConfig, build_config, parse_config_text
from literec.errors import ContractError


class TestParse:
    def test_comments_and_blanks(self):
        text = "# header\n\ntrain.lr = 0.01  # inline\nout=runs/x\n"
        assert parse_config_text(text) == {"train.lr": "0.01", "out": "runs/x"}

    def test_missing_equals(self):
        with pytest.raises(ContractError, match=":2:"):
            parse_config_text("seed=1\njust words\n")

    def test_value_may_contain_equals(self):
        assert parse_config_text("data.path=a=b")["data.path"] == "a=b"


class TestBuild:
    def test_defaults(self):
        cfg = build_config(env={})
        assert cfg.train.lr == 1e-3 and cfg.rec.max_seq_len == 21 and cfg.eval.ks == (10, 20)

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.lr=0.01\ntrain.epochs=7\n")
        cfg = build_config(path, {"train.epochs": "9"}, env={})
        assert cfg.train.lr == 0.01 and cfg.train.epochs == 9

    def test_environment_variable(self, tmp_path):
        path = tmp_path / "env.cfg"
        path.write_text("seed=42\n")
        cfg = build_config(env={ENV_VAR: str(path)})
        assert cfg.seed == 42 and cfg.train.seed == 42

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractError, match="train.lrr"):
            build_config(overrides={"train.lrr": "1"}, env={})

    def test_bad_value(self):
        with pytest.raises(ContractError, match="train.epochs"):
            build_config(overrides={"train.epochs": "many"}, env={})

    def test_invalid_section(self):
        with pytest.raises(ContractError):
            build_config(overrides={"item.model_dim": "10", "item.heads": "4"}, env={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ContractError):
            build_config(tmp_path / "nope.cfg", env={})

    def test_types(self):
        cfg = build_config(overrides={"eval.ks": "5,10,50", "train.validate": "no", "train.dropout": "0.2"}, env={})
        assert cfg.eval.ks == (5, 10, 50) and cfg.train.validate is False

    def test_dropout_propagates_unless_set(self):
        cfg = build_config(overrides={"train.dropout": "0.2", "rec.dropout": "0.0"}, env={})
        assert cfg.item.dropout == 0.2 and cfg.gen.dropout == 0.2 and cfg.rec.dropout == 0.0

    def test_paper_profile(self):
        cfg = build_config(overrides={"profile": "paper"}, env={})
        assert cfg.train.lr == 5e-4 and cfg.train.batch_size == 256 and cfg.item.dropout == 0.8

    def test_round_trip_through_lines(self):
        cfg = build_config(overrides={"train.lr": "0.003", "eval.ks": "1,5"}, env={})
        again = build_config(overrides=parse_config_text("\n".join(cfg.to_lines())), env={})
        assert again == cfg

    def test_every_default_key_is_known(self):
        lines = RunConfig().to_lines()
        assert build_config(overrides=parse_config_text("\n".join(lines)), env={}) == build_config(env={})
