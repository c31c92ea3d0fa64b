import csv
import io
import json
import subprocess
import sys

import pytest

from vcground import synthworld as sw
from vcground.cli import apply_config, read_config, run_cli
from vcground.oracle import CSV_HEADER
from vcground.scene import ValidationError, load_scenes
from vcground.train import Checkpoint, TrainConfig

SMALL = "max_iters=8\nd_w=8\nhidden_size=6\nlayers=1\nlog_every=4\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tc.cfg").write_text("# tiny model\n" + SMALL, encoding="utf-8")
    assert run_cli(["gen", "--split", "train", "--pairs", "30", "--out", str(d / "tr.jsonl"), "--vocab", str(d / "v.txt")]) == 0
    assert run_cli(["gen", "--split", "test", "--pairs", "12", "--out", str(d / "te.jsonl")]) == 0
    assert run_cli(["train", "--data", str(d / "tr.jsonl"), "--config", str(d / "tc.cfg"), "--out", str(d / "m.ckpt")]) == 0
    return d


class TestConfigFiles:
    def test_parse_and_type(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\n\nlr = 0.05\nmax_iters=7\nvariant=vc-no-reg\ninclude_self_pair=false\n", encoding="utf-8")
        cfg = apply_config(TrainConfig, read_config(p), seed=3)
        assert (cfg.lr, cfg.max_iters, cfg.variant, cfg.include_self_pair, cfg.seed) == (0.05, 7, "vc-no-reg", False, 3)

    def test_tuple_field(self, tmp_path):
        p = tmp_path / "w.cfg"
        p.write_text("focus_count=2,3\n", encoding="utf-8")
        assert apply_config(sw.WorldConfig, read_config(p)).focus_count == (2, 3)

    def test_bad_lines(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("lr 0.1\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="line 1"):
            read_config(p)
        with pytest.raises(ValidationError):
            apply_config(TrainConfig, {"max_iters": "many"})
        with pytest.raises(ValidationError):
            apply_config(TrainConfig, {"lr": "-1"})


class TestCommands:
    def test_gen_writes_requested_pairs(self, workdir):
        scenes = load_scenes(workdir / "tr.jsonl")
        assert sum(len(s.expressions) for s in scenes) == 30
        assert (workdir / "v.txt").read_text().split() == list(sw.vocabulary_words())

    def test_train_checkpoint(self, workdir):
        ck = Checkpoint.load(workdir / "m.ckpt")
        assert ck.iteration == 8 and ck.model.d_w == 8

    def test_predict_eval_agree(self, workdir):
        pred, rep1, rep2 = (workdir / n for n in ("p.jsonl", "r1.json", "r2.json"))
        assert run_cli(["predict", "--data", str(workdir / "te.jsonl"), "--ckpt", str(workdir / "m.ckpt"), "--out", str(pred)]) == 0
        assert len(pred.read_text().splitlines()) == 12
        assert run_cli(["eval", "--data", str(workdir / "te.jsonl"), "--pred", str(pred), "--out", str(rep1)]) == 0
        assert run_cli(["eval", "--data", str(workdir / "te.jsonl"), "--ckpt", str(workdir / "m.ckpt"), "--out", str(rep2)]) == 0
        assert rep1.read_text() == rep2.read_text()
        assert json.loads(rep1.read_text())["count"] == 12

    def test_eval_empty_prediction_file(self, workdir, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert run_cli(["eval", "--data", str(workdir / "te.jsonl"), "--pred", str(empty)]) == 1

    def test_attn_rows(self, workdir, tmp_path):
        out = tmp_path / "a.jsonl"
        assert run_cli(["attn", "--data", str(workdir / "te.jsonl"), "--ckpt", str(workdir / "m.ckpt"), "--out", str(out)]) == 0
        rec = json.loads(out.read_text().splitlines()[0])
        assert set(rec["alpha"]) == {"c1", "c2", "r1", "r2", "g"}
        for a in rec["alpha"].values():
            assert len(a) == len(rec["tokens"]) and sum(a) == pytest.approx(1.0, abs=1e-5)

    def test_boundcheck_csv(self, tmp_path):
        out = tmp_path / "b.csv"
        assert run_cli(["boundcheck", "--models", "10", "--out", str(out)]) == 0
        rows = list(csv.reader(io.StringIO(out.read_text())))
        assert rows[0] == CSV_HEADER and len(rows) > 1

    def test_gradcheck_passes(self, tmp_path):
        out = tmp_path / "g.tsv"
        assert run_cli(["gradcheck", "--coords", "3", "--out", str(out)]) == 0
        assert float(out.read_text().splitlines()[-1].split("\t")[1]) < 1e-4

    def test_ablate_row_count(self, workdir, tmp_path):
        out = tmp_path / "t.tsv"
        args = ["ablate", "--seeds", "2", "--config", str(workdir / "tc.cfg"), "--data", str(workdir / "tr.jsonl")]
        args += ["--test", str(workdir / "te.jsonl"), "--out", str(out)]
        assert run_cli(args) == 0
        lines = out.read_text().splitlines()
        assert lines[0].split("\t")[:3] == ["variant", "seed", "accuracy"]
        assert sorted((r.split("\t")[0], r.split("\t")[1]) for r in lines[1:]) == sorted(
            (v, str(s)) for v in ("vc", "vc-no-reg", "vc-no-alpha") for s in range(2)
        )


class TestExitCodes:
    def test_missing_input(self, tmp_path):
        assert run_cli(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x")]) == 1

    def test_bad_flag_value(self):
        assert run_cli(["train", "--mode", "semi"]) == 1
        assert run_cli([]) == 1

    def test_bad_config_key(self, workdir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus=1\n")
        assert run_cli(["train", "--data", str(workdir / "tr.jsonl"), "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1

    def test_malformed_scene_file(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert run_cli(["train", "--data", str(bad), "--out", str(tmp_path / "x")]) == 1

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "vcground", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "boundcheck" in res.stdout
