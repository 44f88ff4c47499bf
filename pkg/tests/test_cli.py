import csv

import pytest

from lanat.cli import main

TINY_YAML = """\
model: {d: 16, heads: 2, ffn_dim: 32, m_slots: 2, vocab: 6,
        feat_dim: 8, conv_channels: 4}
data: {vocab: 6, feat_dim: 8, n_train: 6, n_test: 3, seed: 3}
trainer: {batch_frames: 400, warmup: 20,
          epochs_stage1: 2, epochs_stage2: 2, epochs_stage3: 1, avg_last: 1}
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_YAML)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestGen:
    def test_writes_both_splits(self, tiny_config, tmp_path):
        out = tmp_path / "corpus"
        assert main(["gen", "--config", str(tiny_config), "--out", str(out)]) == 0
        assert (out / "train.tsv").exists()
        assert (out / "test.tsv").exists()
        assert len((out / "train.tsv").read_text().splitlines()) == 6

    def test_deterministic_files(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen", "--config", str(tiny_config), "--out", str(out)]) == 0
        assert (a / "train.tsv").read_bytes() == (b / "train.tsv").read_bytes()
        assert (a / "test.tsv").read_bytes() == (b / "test.tsv").read_bytes()

    def test_nested_out_dir_created(self, tiny_config, tmp_path):
        out = tmp_path / "deep" / "er" / "dir"
        assert main(["gen", "--config", str(tiny_config), "--out", str(out)]) == 0
        assert (out / "train.tsv").exists()

    def test_invalid_spec_names_field(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("data: {vocab: 1}\n")
        assert main(["gen", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1
        assert "data" in err


class TestTrain:
    def test_writes_checkpoint_and_loss_curve(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", "--config", str(tiny_config), "--recipe", "scratch",
                     "--out", str(out)])
        assert code == 0
        assert (out / "model.ckpt").exists()
        rows = read_csv(out / "loss.csv")
        assert rows[0] == ["stage", "epoch", "loss_name", "value"]
        assert all(row[0] == "2" for row in rows[1:])
        assert {row[2] for row in rows[1:]} == {"ctc", "ce_o", "total"}
        assert "scratch" in capsys.readouterr().out

    def test_same_seed_identical_checkpoint(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["train", "--config", str(tiny_config), "--recipe",
                         "scratch", "--out", str(out)]) == 0
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_seed_flag_changes_checkpoint(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(tiny_config), "--recipe", "scratch",
                     "--out", str(a)]) == 0
        assert main(["train", "--config", str(tiny_config), "--recipe", "scratch",
                     "--out", str(b), "--seed", "9"]) == 0
        assert (a / "model.ckpt").read_bytes() != (b / "model.ckpt").read_bytes()

    def test_unknown_recipe_fails(self, tiny_config, tmp_path, capsys):
        assert main(["train", "--config", str(tiny_config), "--recipe", "steps2",
                     "--out", str(tmp_path / "o")]) == 1
        assert "recipe" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    config = root / "run.yaml"
    config.write_text(TINY_YAML)
    out = root / "run"
    assert main(["train", "--config", str(config), "--recipe", "scratch",
                 "--out", str(out)]) == 0
    return config, out / "model.ckpt"


class TestEvalAndAlign:
    def test_eval_report_columns(self, trained, tmp_path, capsys):
        config, ckpt = trained
        out = tmp_path / "ev"
        code = main(["eval", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "test", "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "eval_test.csv")
        assert rows[0] == ["utt_id", "ref", "hyp", "edits", "cer"]
        assert len(rows) == 1 + 3
        assert all(row[0].startswith("test-") for row in rows[1:])
        assert "CER" in capsys.readouterr().out

    def test_eval_train_split(self, trained, tmp_path):
        config, ckpt = trained
        out = tmp_path / "ev"
        assert main(["eval", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "train", "--out", str(out)]) == 0
        assert len(read_csv(out / "eval_train.csv")) == 1 + 6

    def test_eval_unknown_split(self, trained, tmp_path, capsys):
        config, ckpt = trained
        assert main(["eval", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "dev", "--out", str(tmp_path / "o")]) == 1
        assert "split" in capsys.readouterr().err

    def test_eval_empty_split(self, trained, tmp_path, capsys):
        _, ckpt = trained
        config = tmp_path / "no-test.yaml"
        config.write_text(TINY_YAML.replace("n_test: 3", "n_test: 0"))
        assert main(["eval", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "test", "--out", str(tmp_path / "o")]) == 1
        assert "empty" in capsys.readouterr().err

    def test_missing_checkpoint(self, trained, tmp_path, capsys):
        config, _ = trained
        assert main(["eval", "--config", str(config), "--ckpt",
                     str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "o")]) == 1
        capsys.readouterr()

    def test_align_single_utterance_stdout(self, trained, tmp_path, capsys):
        config, ckpt = trained
        code = main(["align", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "train", "--utt", "train-0000",
                     "--out", str(tmp_path / "o")])
        assert code == 0
        out = capsys.readouterr().out
        for line in out.strip().splitlines():
            frame, label = line.split("\t")
            assert int(frame) >= 0
            assert int(label) >= 0

    def test_align_all_writes_files(self, trained, tmp_path):
        config, ckpt = trained
        out = tmp_path / "al"
        assert main(["align", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "test", "--out", str(out)]) == 0
        files = sorted((out / "align").glob("*.txt"))
        assert len(files) == 3

    def test_align_unknown_utterance(self, trained, tmp_path, capsys):
        config, ckpt = trained
        assert main(["align", "--config", str(config), "--ckpt", str(ckpt),
                     "--split", "train", "--utt", "train-9999",
                     "--out", str(tmp_path / "o")]) == 1
        assert "train-9999" in capsys.readouterr().err


class TestBench:
    def test_table_and_csv(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "b"
        code = main(["bench", "--config", str(tiny_config), "--out", str(out),
                     "--lengths", "3,5", "--warmup", "1", "--repeat", "1"])
        assert code == 0
        rows = read_csv(out / "bench.csv")
        assert rows[0] == ["L", "nar_ms", "ar_ms", "speedup"]
        assert [row[0] for row in rows[1:]] == ["3", "5"]
        for row in rows[1:]:
            assert float(row[3]) == pytest.approx(float(row[2]) / float(row[1]),
                                                  rel=1e-3)
        assert "speedup" in capsys.readouterr().out


class TestAblate:
    def test_grid_rows_and_means(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "abl"
        code = main(["ablate", "--config", str(tiny_config), "--out", str(out),
                     "--seeds", "1"])
        assert code == 0
        rows = read_csv(out / "ablate.csv")
        assert rows[0] == ["recipe", "seed", "cer"]
        recipes = [row[0] for row in rows[1:]]
        assert recipes == ["scratch", "scratch", "step3", "step3",
                           "steps13", "steps13", "steps123", "steps123"]
        mean_rows = [row for row in rows[1:] if row[1] == "mean"]
        assert len(mean_rows) == 4
        assert capsys.readouterr().out.count("mean CER") == 4
