import json
from pathlib import Path

import pytest

from agglora.cli import cli_dispatch, load_config_file, split_config
from agglora.checkpoint import load_checkpoint
from agglora.data import IngestError

TINY_CFG = """\
# toy geometry for fast end-to-end runs
d = 8
n_layers = 1
n_heads = 2
vocab_size = 260
max_seq_len = 128
rank = 2
alpha = 4.0
n_experts = 4
top_k = 2
shared_experts = 2
epochs = 1
batch_size = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


def last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


class TestConfigFile:
    def test_key_value_parsing(self, cfg_file):
        raw = load_config_file(cfg_file)
        assert raw["d"] == 8 and raw["alpha"] == 4.0
        m, t, a = split_config(raw)
        assert m["d"] == 8 and t["epochs"] == 1 and a["rank"] == 2

    def test_json_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"d": 16, "rank": 4}')
        m, t, a = split_config(load_config_file(p))
        assert m == {"d": 16} and a == {"rank": 4}

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("banana = 3\n")
        with pytest.raises(IngestError, match="banana"):
            split_config(load_config_file(str(p)))

    def test_malformed_line_reports_lineno(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("d = 8\nnot a pair\n")
        with pytest.raises(IngestError, match="line 2"):
            load_config_file(str(p))


class TestGenData:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        for out in (a, b):
            assert cli_dispatch(["gen-data", "--task", "alignment", "--n", "30",
                                 "--seed", "5", "--out", out]) == 0
        assert Path(a).read_bytes() == Path(b).read_bytes()
        assert last_json(capsys)["cmd"] == "gen-data"

    def test_knowledge_with_facts_out(self, tmp_path):
        out = str(tmp_path / "k.jsonl")
        facts = str(tmp_path / "facts.json")
        assert cli_dispatch(["gen-data", "--task", "knowledge", "--n", "10",
                             "--seed", "1", "--out", out, "--facts-out", facts]) == 0
        d = json.loads(Path(facts).read_text())
        assert d["seed"] == 1 and d["triples"]


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, tmp_path, capsys):
        assert cli_dispatch(["gen-data", "--task", "alignment", "--n", "5",
                             "--out", str(tmp_path / "x"), "--frobnicate"]) == 2
        capsys.readouterr()

    def test_missing_required_arg(self, capsys):
        assert cli_dispatch(["gen-data", "--task", "alignment"]) == 2
        capsys.readouterr()

    def test_strip_na_on_base_is_domain_error(self, tmp_path, cfg_file, capsys):
        base = str(tmp_path / "base")
        assert cli_dispatch(["init-base", "--config", cfg_file, "--seed", "0",
                             "--out", base]) == 0
        rc = cli_dispatch(["strip-na", "--ckpt", base, "--out", str(tmp_path / "s")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_checkpoint_is_domain_error(self, tmp_path, capsys):
        rc = cli_dispatch(["strip-na", "--ckpt", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "s")])
        assert rc == 1
        capsys.readouterr()


class TestEndToEnd:
    def test_stage_chain_emits_checkpoints(self, tmp_path, cfg_file, capsys):
        t = lambda name: str(tmp_path / name)
        data = t("mix.jsonl")
        assert cli_dispatch(["gen-data", "--task", "alignment", "--n", "24",
                             "--seed", "2", "--out", data]) == 0
        assert cli_dispatch(["init-base", "--config", cfg_file, "--seed", "0",
                             "--out", t("base")]) == 0
        assert cli_dispatch(["train", "mka", "--config", cfg_file, "--seed", "0",
                             "--ckpt", t("base"), "--data", data,
                             "--out", t("mka"), "--log", t("mka.log")]) == 0
        assert cli_dispatch(["strip-na", "--ckpt", t("mka"),
                             "--out", t("stripped")]) == 0
        assert cli_dispatch(["merge-attn", "--ckpt", t("stripped"),
                             "--out", t("attn_merged")]) == 0
        assert cli_dispatch(["train", "da", "--config", cfg_file, "--seed", "0",
                             "--ckpt", t("attn_merged"), "--data", data,
                             "--lambda", "1.0", "--epochs", "1",
                             "--out", t("da")]) == 0
        assert cli_dispatch(["merge", "--ckpt", t("da"), "--out", t("final")]) == 0
        stages = {"base": "base", "mka": "mka", "stripped": "stripped",
                  "attn_merged": "stripped", "da": "da", "final": "merged"}
        for name, stage in stages.items():
            assert load_checkpoint(t(name)).stage == stage
        log = Path(t("mka.log")).read_text()
        assert "nll=" in log and "summary" in log

        # merged model evaluates end-to-end
        assert cli_dispatch(["eval", "--ckpt", t("final"), "--data", data,
                             "--metric", "format"]) == 0
        rec = last_json(capsys)
        assert 0.0 <= rec["score"] <= 1.0 and rec["n"] == 24

    def test_route_stats_cmd(self, tmp_path, cfg_file, capsys):
        t = lambda name: str(tmp_path / name)
        data = t("d.jsonl")
        cli_dispatch(["gen-data", "--task", "alignment", "--n", "16", "--seed", "3",
                      "--out", data])
        cli_dispatch(["init-base", "--config", cfg_file, "--seed", "0",
                      "--out", t("base")])
        cli_dispatch(["train", "mka", "--config", cfg_file, "--seed", "0",
                      "--ckpt", t("base"), "--data", data, "--out", t("mka")])
        assert cli_dispatch(["route-stats", "--ckpt", t("mka"), "--data", data,
                             "--out", t("act.csv")]) == 0
        rec = last_json(capsys)
        assert rec["total_count"] > 0
        rows = Path(t("act.csv")).read_text().strip().splitlines()
        assert len(rows) == 4  # n_experts from config
