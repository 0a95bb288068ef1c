import json

import pytest

from georank.cli import PipelineConfig, UsageError, execute, load_config, build_parser
from georank.index import WorldIndex, read_manifest


def run(capsys, *argv):
    code = execute([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    assert execute(["synth", "--out-dir", str(out), "--n-records", "1500", "--n-queries", "12", "--seed", "4"]) == 0
    return out


@pytest.fixture(scope="module")
def index_path(world_dir):
    path = world_dir / "world.gwix"
    assert execute(["index", "build", "--manifest", str(world_dir / "records.jsonl"), "--out", str(path), "--dim", "64"]) == 0
    return path


class TestExitCodes:
    def test_no_command(self, capsys):
        assert run(capsys)[0] == 1

    def test_unknown_command(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1 and "error" in err

    def test_missing_required(self, capsys):
        assert run(capsys, "index", "build", "--out", "x")[0] == 1

    def test_missing_file_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "index", "info", tmp_path / "nope.gwix")
        assert code == 2 and "error" in err

    def test_corrupt_index_is_data_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.gwix"
        bad.write_bytes(b"GWIX garbage")
        assert run(capsys, "index", "info", bad)[0] == 2

    def test_n_not_below_k(self, capsys, tmp_path):
        code, _, err = run(capsys, "think", "--refined", tmp_path / "r.jsonl", "--n", 20, "--k", 20, "--mock", "echo")
        assert code == 1 and "n must be < k" in err

    def test_think_needs_backend(self, capsys, tmp_path):
        code, _, err = run(capsys, "think", "--refined", tmp_path / "r.jsonl", "--n", 3, "--k", 5)
        assert code == 1 and "--endpoint" in err


class TestConfig:
    def test_file_values_and_flag_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"k": 30, "eps_km": 10, "n": 12}))
        args = build_parser().parse_args(["--config", str(cfg_path), "refine", "--index", "i", "--query-manifest", "q", "--k", "25"])
        cfg = load_config(args.pipeline_config, args, uses_n=False)
        assert (cfg.k, cfg.eps_km, cfg.n, cfg.min_pts) == (25, 10, 12, 2)

    def test_unknown_key(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"kk": 3}))
        args = build_parser().parse_args(["--config", str(cfg_path), "selftest"])
        with pytest.raises(UsageError, match="unknown config key"):
            load_config(args.pipeline_config, args)

    def test_unreadable_config_exit_1(self, capsys, tmp_path):
        assert run(capsys, "--config", tmp_path / "missing.json", "selftest", "--quick")[0] == 1

    @pytest.mark.parametrize("kw", [{"k": 0}, {"eps_km": 0}, {"min_pts": 1}, {"n": 0}])
    def test_validate(self, kw):
        with pytest.raises(UsageError):
            PipelineConfig(**kw).validate()

    def test_n_check_only_when_used(self):
        PipelineConfig(k=5, n=10).validate(uses_n=False)
        with pytest.raises(UsageError):
            PipelineConfig(k=5, n=10).validate(uses_n=True)

    def test_bad_thresholds(self):
        with pytest.raises(UsageError):
            PipelineConfig(thresholds=[["a", 5], ["b", 1]]).threshold_set()


class TestSynth:
    def test_repeatable(self, capsys, tmp_path):
        outs = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, "synth", "--out-dir", tmp_path / name, "--n-records", 200, "--n-queries", 10, "--seed", 7)
            assert code == 0
            outs.append(json.loads(out))
        assert outs[0]["records.jsonl"] == outs[1]["records.jsonl"]
        assert (tmp_path / "a" / "records.jsonl").read_bytes() == (tmp_path / "b" / "records.jsonl").read_bytes()

    def test_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "synth.json"
        cfg.write_text(json.dumps({"n_records": 120, "n_queries": 4, "dim": 16, "outlier_rate": 0.0}))
        assert run(capsys, "synth", "--config", cfg, "--out-dir", tmp_path / "w")[0] == 0
        assert len(list(read_manifest(tmp_path / "w" / "records.jsonl"))) == 120

    def test_invalid_config(self, capsys, tmp_path):
        assert run(capsys, "synth", "--out-dir", tmp_path / "w", "--outlier-rate", 2.0)[0] == 1


class TestPipeline:
    def test_index_info(self, capsys, index_path):
        code, out, _ = run(capsys, "index", "info", index_path, "--json")
        info = json.loads(out)
        assert code == 0 and info["count"] == 1500 and info["dim"] == 64
        assert info["manifest_digest"] == WorldIndex.load(index_path).manifest_digest.hex()

    def test_query(self, capsys, world_dir, index_path, tmp_path):
        out = tmp_path / "q.jsonl"
        code, *_ = run(capsys, "query", "--index", index_path, "--query-manifest", world_dir / "queries.jsonl", "--k", 7, "--out", out)
        rows = list(read_manifest(out))
        assert code == 0 and len(rows) == 12
        assert all(len(r["similar"]) == 7 and len(r["dissimilar"]) == 7 for r in rows)
        scores = [c["score"] for c in rows[0]["similar"]]
        assert scores == sorted(scores, reverse=True)

    def test_refine_think_eval(self, capsys, world_dir, index_path, tmp_path):
        refined, preds = tmp_path / "refined.jsonl", tmp_path / "pred.jsonl"
        assert run(capsys, "refine", "--index", index_path, "--query-manifest", world_dir / "queries.jsonl",
                   "--k", 20, "--eps-km", 5, "--out", refined)[0] == 0
        rows = list(read_manifest(refined))
        assert {"id", "image", "reference", "used_fallback", "reranked", "dissimilar"} <= set(rows[0])
        dists = [c["distance_km"] for c in rows[0]["reranked"]]
        assert dists == sorted(dists)

        code, *_ = run(capsys, "think", "--refined", refined, "--dataset", "im2gps", "--k", 20, "--mock", "echo",
                       "--save-prompts", "--out", preds)
        assert code == 0
        out_rows = list(read_manifest(preds))
        for r, p in zip(rows, out_rows):
            assert p["source"] == "lmm"
            assert (p["lat"], p["lon"]) == (r["reranked"][0]["lat"], r["reranked"][0]["lon"])
            assert "LIKELY" in p["prompt"] and "UNLIKELY" in p["prompt"]

        code, out, _ = run(capsys, "eval", "--pred", preds, "--truth", world_dir / "queries.jsonl", "--variant", "echo", "--json")
        levels = [json.loads(line) for line in out.splitlines()]
        assert code == 0 and [lv["level"] for lv in levels][:2] == ["street", "city"]

    def test_think_unreachable_endpoint_falls_back(self, capsys, world_dir, index_path, tmp_path):
        refined, preds = tmp_path / "refined.jsonl", tmp_path / "pred.jsonl"
        run(capsys, "refine", "--index", index_path, "--query-manifest", world_dir / "queries.jsonl", "--out", refined)
        code, *_ = run(capsys, "think", "--refined", refined, "--n", 3, "--endpoint", "http://127.0.0.1:9/v1",
                       "--max-retries", 0, "--timeout", 1, "--out", preds)
        assert code == 0
        assert {r["source"] for r in read_manifest(preds)} == {"fallback_top1"}

    def test_eval_missing_prediction(self, capsys, world_dir, tmp_path):
        preds = tmp_path / "p.jsonl"
        preds.write_text('{"id": "q000000", "lat": 0, "lon": 0}\n')
        assert run(capsys, "eval", "--pred", preds, "--truth", world_dir / "queries.jsonl")[0] == 2

    def test_ablate(self, capsys, world_dir):
        code, out, _ = run(capsys, "ablate", "--world", world_dir, "--variants", "top1", "rerank(5)", "rerank(5)+echo(10)")
        assert code == 0
        assert "rerank(5)+echo(10)" in out and "street@1km" in out

    def test_ablate_bad_variant(self, capsys, world_dir):
        assert run(capsys, "ablate", "--world", world_dir, "--variants", "nonsense")[0] == 1

    def test_ablate_eps_sweep_json(self, capsys, world_dir, tmp_path):
        out = tmp_path / "sweep.jsonl"
        assert run(capsys, "ablate", "--world", world_dir, "--sweep", "eps", "--json", "--out", out)[0] == 0
        variants = list(dict.fromkeys(r["variant"] for r in read_manifest(out)))
        assert variants == ["top1"] + [f"rerank({e})" for e in (5, 10, 20, 30, 50, 100)]

    def test_output_leaves_no_temp_files(self, capsys, world_dir, index_path, tmp_path):
        out = tmp_path / "q.jsonl"
        run(capsys, "query", "--index", index_path, "--query-manifest", world_dir / "queries.jsonl", "--out", out)
        assert [p.name for p in tmp_path.iterdir()] == ["q.jsonl"]


def test_selftest_quick(capsys):
    code, out, _ = run(capsys, "selftest", "--quick")
    assert code == 0
    assert out.count("PASS") == len(out.strip().splitlines())
