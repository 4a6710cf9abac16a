import hashlib
import json

import pytest

from protoargnet import cli
from protoargnet.trainer import TrainReport

TINY = ["--model.backbone_channels=4,8", "--model.n_prototypes=6", "--model.n_combinations=2",
        "--model.mlp_hidden=5", "--train.epochs=1", "--train.batch_size=16"]


def digest_tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(root, capsys=None):
    root.mkdir(parents=True, exist_ok=True)
    data = root / "data.bin"
    assert cli.main(["gen-data", "--seed", "3", "--n", "120", "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(root / "train"), *TINY]) == 0
    ckpt = root / "train" / "model.ckpt"
    assert cli.main(["sparsify", "--checkpoint", str(ckpt), "--data", str(data), "--ratio", "0.4",
                     "--out", str(root / "sparse")]) == 0
    assert cli.main(["explain", "--checkpoint", str(ckpt), "--qbaf", str(root / "sparse" / "qbaf.json"),
                     "--data", str(data), "--index", "5", "--out", str(root / "explain")]) == 0
    return data, ckpt


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = pipeline(root)
    return root, data, ckpt


class TestPipeline:
    def test_artifacts(self, run):
        root, _, _ = run
        for name in ("config.txt", "model.ckpt", "report.jsonl"):
            assert (root / "train" / name).is_file()
        for name in ("qbaf.json", "qbaf.graph", "metrics.json"):
            assert (root / "sparse" / name).is_file()
        rasters = sorted(p.name for p in (root / "explain" / "rasters").iterdir())
        assert rasters == ["input.ppm", "overlay_class0.ppm", "overlay_class1.ppm"]
        assert (root / "explain" / "explanation.json").is_file()
        assert (root / "explain" / "qbaf_strengths.graph").is_file()

    def test_config_echo(self, run):
        text = (run[0] / "train" / "config.txt").read_text()
        assert "model.n_prototypes = 6" in text
        assert "train.epochs = 1" in text

    def test_deterministic(self, run, tmp_path):
        pipeline(tmp_path / "again")
        first = digest_tree(run[0])
        second = digest_tree(tmp_path / "again")
        assert first == second

    def test_eval_matches_report(self, run, capsys):
        root, data, ckpt = run
        capsys.readouterr()
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data)]) == 0
        printed = float(capsys.readouterr().out.split(":")[1])
        report = TrainReport.from_lines((root / "train" / "report.jsonl").read_text())
        assert printed == pytest.approx(report.final_test_acc, abs=5e-5)

    def test_sparsify_ratio_zero(self, run, tmp_path):
        _, data, ckpt = run
        assert cli.main(["sparsify", "--checkpoint", str(ckpt), "--data", str(data), "--ratio", "0",
                         "--out", str(tmp_path)]) == 0
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert m["hidden"] == 0 and m["output"] == 0
        assert m["accuracy"] == m["model_accuracy"]
        assert m["cognitive_complexity"] == 2 + 5 + 2
        assert m["cognitive_complexity_paper"] == 2 + 5


class TestErrors:
    def test_unknown_override(self, run, capsys):
        code = cli.main(["train", "--data", str(run[1]), "--model.n_protos=3"])
        assert code == 1
        assert "model.n_protos" in capsys.readouterr().err

    def test_bad_override_value(self, run, capsys):
        assert cli.main(["train", "--data", str(run[1]), "--train.epochs=many"]) == 1

    def test_ratio_one(self, run):
        _, data, ckpt = run
        assert cli.main(["sparsify", "--checkpoint", str(ckpt), "--data", str(data), "--ratio", "1"]) == 1

    def test_index_out_of_range(self, run, capsys):
        root, data, ckpt = run
        code = cli.main(["explain", "--checkpoint", str(ckpt), "--qbaf", str(root / "sparse" / "qbaf.json"),
                         "--data", str(data), "--index", "500"])
        assert code == 1
        assert "120" in capsys.readouterr().err

    def test_hash_mismatch(self, run, tmp_path, capsys):
        root, data, ckpt = run
        doc = json.loads((root / "sparse" / "qbaf.json").read_text())
        doc["source_hash"] = "0" * 64
        (tmp_path / "q.json").write_text(json.dumps(doc))
        code = cli.main(["explain", "--checkpoint", str(ckpt), "--qbaf", str(tmp_path / "q.json"),
                         "--data", str(data), "--index", "1", "--out", str(tmp_path / "x")])
        assert code == 1
        assert "hash" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tmp_path / "d")]) == 1

    def test_corrupt_checkpoint(self, run, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage" * 10)
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", str(run[1])]) == 2

    def test_corrupt_dataset(self, run, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"SHPX" + bytes(40))
        assert cli.main(["eval", "--checkpoint", str(run[2]), "--data", str(tmp_path / "bad.bin")]) == 2

    def test_no_command(self):
        assert cli.main([]) == 1

    def test_gen_data_tiny(self, tmp_path):
        assert cli.main(["gen-data", "--n", "1", "--out", str(tmp_path / "d")]) == 1


def test_config_file_and_override(run, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk\nmodel.n_prototypes = 4\ntrain.epochs = 3\n")
    args = ["train", "--data", str(run[1]), "--config", str(cfg), "--out", str(tmp_path / "t"),
            *[a for a in TINY if "n_prototypes" not in a and "epochs" not in a], "--train.epochs=1"]
    assert cli.main(args) == 0
    text = (tmp_path / "t" / "config.txt").read_text()
    assert "model.n_prototypes = 4" in text and "train.epochs = 1" in text


def test_run_root_env(run, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "runs"))
    _, data, ckpt = run
    assert cli.main(["sparsify", "--checkpoint", str(ckpt), "--data", str(data), "--ratio", "0.2"]) == 0
    assert (tmp_path / "runs" / "sparsify-0.2" / "metrics.json").is_file()
