import subprocess
import sys

import pytest

from hetrep.cli import main
from hetrep.infer import EmbeddingTable

from conftest import run_smoke_pipeline


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_flags_and_keys(tmp_path, capsys):
    assert main(["synth-data"]) == 1
    assert main(["synth-data", "--out", str(tmp_path / "w"), "--set", "world.nope=1"]) == 1
    assert main(["synth-data", "--out", str(tmp_path / "w"), "--set", "world.clusters=x"]) == 1
    assert main(["sample", "--graph", str(tmp_path / "missing"), "--node", "1", "--type", "Pin"]) == 2
    assert "error" in capsys.readouterr().err


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "hetrep.cli"], capture_output=True, text=True, timeout=60)
    assert out.returncode == 1 and "usage" in out.stderr


def test_synth_data_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth-data", "--out", str(tmp_path / d), "--seed", "7", "--set", "world.clusters=2",
                     "--set", "world.pins_per_cluster=30", "--set", "world.users=20"]) == 0
    for name in ("edges.tsv", "sequences.tsv", "schema.cfg", "features/part-00000.osfs", "world.config"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_smoke_pipeline(tmp_path, capsys):
    out = run_smoke_pipeline(tmp_path)
    printed = capsys.readouterr().out
    assert "recall@10\t" in printed
    table = EmbeddingTable.load(out["table"])
    table.check_unit()
    assert table.meta["checkpoint_sha256"] and (tmp_path / "model.osck.config").exists()
    assert main(["sample", "--graph", str(out["pruned"]), "--node", "0", "--type", "Pin",
                 "--config", str(tmp_path / "run.cfg")]) == 0


def test_infer_rejects_foreign_checkpoint(tmp_path):
    out = run_smoke_pipeline(tmp_path / "r")
    other = tmp_path / "other.cfg"
    other.write_text("node.Pin = 0\nnode.Board = 1\nedge.PB = 0\nedge.PP = 1\nhash.vocab = 8\n")
    (tmp_path / "e.tsv").write_text("1\tPin\t2\tBoard\tPB\n")
    assert main(["build", "--edges", str(tmp_path / "e.tsv"), "--schema", str(other), "--out", str(tmp_path / "g")]) == 0
    assert main(["infer", "--graph", str(tmp_path / "g"), "--store", str(tmp_path / "r" / "world" / "features"),
                 "--checkpoint", str(out["ckpt"]), "--out", str(tmp_path / "x")]) in (1, 2)
