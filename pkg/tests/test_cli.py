import csv
import hashlib
import json

import numpy as np
import pytest

from bamg.basegraph import Graph
from bamg.cli import CSV_COLUMNS, EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from bamg.core import Dataset, write_fvecs, write_ivecs
from bamg.storage import INDEX_FILES

TINY = ["--R", "8", "--L-build", "16", "--C-cand", "40", "--knn-k", "8", "--k-codes", "16",
        "--pq-iters", "3", "--gamma", "8"]


def hashes(d):
    return {n: hashlib.sha256((d / n).read_bytes()).hexdigest() for n in INDEX_FILES}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d), "--n", "400", "--nq", "20", "--dim", "8",
                 "--clusters", "4", "--k", "10"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def built(data):
    out = data / "ix"
    assert main(["build", "--data", str(data / "base.fvecs"), "--out", str(out),
                 "--report", str(data / "report.txt")] + TINY) == EXIT_OK
    return out


class TestGen:
    def test_files(self, data):
        for n in ("base.fvecs", "query.fvecs", "gt.ivecs"):
            assert (data / n).stat().st_size > 0


class TestBuild:
    def test_five_files_and_report(self, data, built):
        assert all((built / n).exists() for n in INDEX_FILES)
        rep = (data / "report.txt").read_text()
        for key in ("edges:", "degrees_index:", "layer_sizes:", "rho_base:", "wall_seconds:"):
            assert key in rep

    def test_deterministic(self, data, built, tmp_path):
        out = tmp_path / "again"
        assert main(["build", "--data", str(data / "base.fvecs"), "--out", str(out)] + TINY) == EXIT_OK
        assert hashes(out) == hashes(built)

    def test_ablation_keeps_nsg_edges(self, data, tmp_path, capsys):
        out = tmp_path / "abl"
        assert main(["build", "--data", str(data / "base.fvecs"), "--out", str(out),
                     "--ablate-bmrng"] + TINY) == EXIT_OK
        rep = capsys.readouterr().out
        assert "cross_pruned" not in rep
        assert hashes(out)["graph.blk"] != hashes(data / "ix")["graph.blk"]

    def test_config_file_with_flag_override(self, data, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data": str(data / "base.fvecs"), "out": str(tmp_path / "c"),
                                   "R": 8, "L_build": 16, "C_cand": 40, "knn_k": 8,
                                   "k_codes": 16, "pq_iters": 3, "gamma": 8, "alpha": 2}))
        assert main(["build", "--config", str(cfg), "--alpha", "3"]) == EXIT_OK
        meta = json.loads(_info(tmp_path / "c"))
        assert meta["build"]["alpha"] == 3 and meta["build"]["R"] == 8

    def test_baseline_layout(self, data, tmp_path):
        out = tmp_path / "base"
        assert main(["build", "--data", str(data / "base.fvecs"), "--out", str(out),
                     "--layout", "baseline"] + TINY) == EXIT_OK
        assert json.loads(_info(out))["layout"] == "baseline"

    def test_usage_errors(self, data, tmp_path):
        assert main(["build", "--data", str(data / "base.fvecs")]) == EXIT_USAGE
        assert main(["build", "--data", str(data / "base.fvecs"), "--out", str(tmp_path / "x"),
                     "--alpha", "99"]) == EXIT_USAGE
        bad = tmp_path / "bad.json"
        bad.write_text('{"nope": 1}')
        assert main(["build", "--config", str(bad)]) == EXIT_USAGE
        with pytest.raises(SystemExit) as e:
            main(["bench"])
        assert e.value.code == EXIT_USAGE

    def test_missing_data_is_io_error(self, tmp_path):
        out = tmp_path / "none"
        assert main(["build", "--data", str(tmp_path / "missing.fvecs"), "--out", str(out)]) == EXIT_IO
        assert not out.exists()

    def test_failed_stage_leaves_nothing(self, data, tmp_path, monkeypatch, capsys):
        import bamg.cli

        def boom(*a, **k):
            raise RuntimeError("injected")
        monkeypatch.setattr(bamg.cli, "build_bamg", boom)
        out = tmp_path / "ix"
        assert main(["build", "--data", str(data / "base.fvecs"), "--out", str(out)] + TINY) != EXIT_OK
        assert "stage 'bamg' failed" in capsys.readouterr().err
        assert list(tmp_path.iterdir()) == []


def _info(index):
    import contextlib
    import io
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert main(["info", "--index", str(index)]) == EXIT_OK
    return buf.getvalue()


class TestBench:
    def test_csv(self, data, built, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bench", "--index", str(built), "--queries", str(data / "query.fvecs"),
                     "--gt", str(data / "gt.ivecs"), "--l", "16,32,64,128", "--k", "10",
                     "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(out.open()))
        assert list(rows[0]) == CSV_COLUMNS and len(rows) == 4
        rec = [float(r["recall"]) for r in rows]
        assert all(b >= a for a, b in zip(rec, rec[1:]))
        for r in rows:
            assert float(r["nio"]) == pytest.approx(float(r["graph_reads"]) + float(r["raw_reads"]))

    def test_engines(self, data, built, tmp_path):
        for eng in ("bamg-no-nav",):
            assert main(["bench", "--index", str(built), "--queries", str(data / "query.fvecs"),
                         "--gt", str(data / "gt.ivecs"), "--l", "32", "--engine", eng,
                         "--out", str(tmp_path / "e.csv")]) == EXIT_OK
        assert main(["bench", "--index", str(built), "--queries", str(data / "query.fvecs"),
                     "--gt", str(data / "gt.ivecs"), "--engine", "baseline"]) == EXIT_USAGE

    def test_dimension_mismatch(self, data, built, tmp_path):
        write_fvecs(tmp_path / "q.fvecs", np.zeros((2, 3)))
        assert main(["bench", "--index", str(built), "--queries", str(tmp_path / "q.fvecs"),
                     "--gt", str(data / "gt.ivecs")]) == EXIT_USAGE

    def test_single_vector_dataset(self, tmp_path):
        write_fvecs(tmp_path / "one.fvecs", np.array([[1.0, 2.0]]))
        write_ivecs(tmp_path / "gt.ivecs", np.array([[0]]))
        out = tmp_path / "ix"
        assert main(["build", "--data", str(tmp_path / "one.fvecs"), "--out", str(out),
                     "--k-codes", "1"]) == EXIT_OK
        assert main(["bench", "--index", str(out), "--queries", str(tmp_path / "one.fvecs"),
                     "--gt", str(tmp_path / "gt.ivecs"), "--l", "1", "--k", "1",
                     "--out", str(tmp_path / "r.csv")]) == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "r.csv").open()))
        assert float(rows[0]["recall"]) == 1.0


class TestVerify:
    def run(self, args, capsys):
        code = main(["verify"] + args)
        return code, json.loads(capsys.readouterr().out)

    def test_roundtrip(self, data, built, capsys):
        code, res = self.run(["--mode", "roundtrip", "--index", str(built),
                              "--data", str(data / "base.fvecs")], capsys)
        assert code == EXIT_OK and res["pass"] and res["vectors_equal"]

    def test_bmrng_exact(self, capsys):
        code, res = self.run(["--mode", "bmrng-exact", "--n", "120", "--capacity", "6"], capsys)
        assert code == EXIT_OK and res["pairs_checked"] == 120 * 119 and res["failures"] == 0

    def test_io_paths_on_built_index(self, built, capsys):
        code, res = self.run(["--mode", "io-paths", "--index", str(built)], capsys)
        assert res["pairs_checked"] == 400 * 399
        assert code == (EXIT_OK if res["failures"] == 0 else EXIT_VERIFY)

    def test_forced_counterexample(self, tmp_path, capsys):
        write_fvecs(tmp_path / "two.fvecs", np.array([[0.0, 0.0], [1.0, 0.0]]))
        # the only cross-block edge 0 -> 1 is missing
        (tmp_path / "g.txt").write_text(Graph.from_lists([[], [0]]).to_text())
        (tmp_path / "l.txt").write_text("0 1")
        code, res = self.run(["--mode", "io-paths", "--graph", str(tmp_path / "g.txt"),
                              "--data", str(tmp_path / "two.fvecs"),
                              "--labels", str(tmp_path / "l.txt"), "--capacity", "1"], capsys)
        assert code == EXIT_VERIFY and not res["pass"]
        assert res["counterexamples"][0]["pair"] == [0, 1]
        assert res["counterexamples"][0]["assignment"] == [0, 1]

    def test_trend(self, capsys):
        code, res = self.run(["--mode", "trend", "--n", "300", "--trials", "100"], capsys)
        assert code == EXIT_OK and res["pass"]

    def test_desk_scale_guard(self, tmp_path, capsys):
        write_fvecs(tmp_path / "big.fvecs", Dataset(np.random.default_rng(0).random((5001, 2))))
        assert main(["verify", "--mode", "bmrng-exact", "--data", str(tmp_path / "big.fvecs")]) == EXIT_USAGE


class TestInfo:
    def test_info(self, built):
        meta = json.loads(_info(built))
        assert meta["n"] == 400 and meta["layout"] == "bamg"
        assert set(meta["files"]) == set(INDEX_FILES)
        assert meta["layer_sizes"][0] == 400
