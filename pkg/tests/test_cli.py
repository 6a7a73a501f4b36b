import csv
import io
import json

import numpy as np
import pytest

from radix_compact import (
    CompactionPlan,
    ModelConfig,
    build_plan,
    init_params,
    load_plan,
    save_batch,
    save_checkpoint,
    save_plan,
)
from radix_compact.bench import Pattern, make_pattern_batch
from radix_compact.cli import main
from radix_compact.ragged import RaggedBatch, default_positions

TOY = {"token_ids": [1, 2, 3, 1, 2, 4], "cu_seqlens": [0, 3, 6]}

SMALL = ModelConfig(
    num_layers=1,
    hidden_size=8,
    intermediate_size=16,
    num_heads=2,
    num_kv_heads=1,
    head_dim=4,
    vocab_size=128,
)


@pytest.fixture
def toy_batch_file(tmp_path):
    path = tmp_path / "batch.json"
    path.write_text(json.dumps(TOY))
    return str(path)


def test_plan_summary_line(toy_batch_file, capsys):
    assert main(["plan", toy_batch_file]) == 0
    out = capsys.readouterr().out
    assert out.strip() == "N=6 N'=4 gamma=0.667 enabled=true"


def test_plan_writes_loadable_output(toy_batch_file, tmp_path, capsys):
    out_json = tmp_path / "plan.json"
    out_bin = tmp_path / "plan.rdxp"
    assert main(["plan", toy_batch_file, "-o", str(out_json)]) == 0
    assert main(["plan", toy_batch_file, "-o", str(out_bin), "--binary"]) == 0
    capsys.readouterr()
    for path in (out_json, out_bin):
        plan = load_plan(path)
        assert plan.gather_indices.tolist() == [0, 1, 2, 5]
        assert plan.scatter_indices.tolist() == [0, 1, 2, 0, 1, 3]


def test_plan_single_sequence_disabled(tmp_path, capsys):
    path = tmp_path / "one.json"
    path.write_text(json.dumps({"token_ids": [5, 6, 7], "cu_seqlens": [0, 3]}))
    assert main(["plan", str(path)]) == 0
    out = capsys.readouterr().out
    assert "gamma=1.000" in out and "enabled=false" in out


def test_plan_json_output(toy_batch_file, capsys):
    assert main(["plan", toy_batch_file, "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload == {"N": 6, "N_compact": 4, "gamma": pytest.approx(4 / 6), "enabled": True}


def test_plan_bucket_size(toy_batch_file, tmp_path, capsys):
    out = tmp_path / "plan.json"
    assert main(["plan", toy_batch_file, "--bucket-size", "8", "-o", str(out)]) == 0
    capsys.readouterr()
    plan = load_plan(out)
    assert plan.n_compact == 4


def test_plan_corrupted_offsets_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"token_ids": [1, 2, 3], "cu_seqlens": [0, 3, 2]}))
    assert main(["plan", str(path)]) == 2
    assert "NonMonotoneOffsets" in capsys.readouterr().err


def test_plan_missing_file_exit_2(capsys):
    assert main(["plan", "/nonexistent/batch.json"]) == 2
    assert capsys.readouterr().err


def test_verify_default_passes(capsys):
    assert main(["verify", "--patterns", "shared_prefix", "mixed_lengths"]) == 0
    out = capsys.readouterr().out
    assert "shared_prefix" in out and "mixed_lengths" in out
    assert out.strip().endswith("PASS")


def test_verify_single_pattern_row(capsys):
    assert main(["verify", "--patterns", "single_sequence", "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["pass"] is True
    assert len(payload["results"]) == 1
    assert payload["results"][0]["bypassed"] is True


def test_verify_fixture_dir(tmp_path, capsys):
    fixtures = tmp_path / "ckpt"
    save_checkpoint(SMALL, init_params(SMALL, seed=0), fixtures)
    assert main(["verify", str(fixtures), "--patterns", "shared_prefix"]) == 0
    capsys.readouterr()


def test_verify_corrupted_plan_exit_1(tmp_path, capsys):
    fixtures = tmp_path / "ckpt"
    save_checkpoint(SMALL, init_params(SMALL, seed=0), fixtures)
    batch = make_pattern_batch(Pattern.SHARED_PREFIX, seed=0)
    plan = build_plan(batch)
    scatter = np.array(plan.scatter_indices)
    scatter[-1] = 0  # wrong representative for the last token
    bad = CompactionPlan(
        gather_indices=plan.gather_indices,
        scatter_indices=scatter,
        compact_positions=plan.compact_positions,
        n_original=plan.n_original,
        n_compact=plan.n_compact,
    )
    plans_dir = fixtures / "plans"
    plans_dir.mkdir()
    save_plan(bad, plans_dir / "shared_prefix.json")
    assert main(["verify", str(fixtures), "--patterns", "shared_prefix"]) == 1
    out = capsys.readouterr().out
    assert out.strip().endswith("FAIL")


def test_bench_custom_specs(tmp_path, capsys):
    spec_file = tmp_path / "specs.json"
    spec_file.write_text(json.dumps([{"B": 4, "P": 8, "S": 4}, {"B": 2, "P": 2, "S": 2}]))
    assert main(["bench", str(spec_file), "--repeats", "3"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["spec"] for r in rows] == ["B4_P8_S4", "B2_P2_S2"]
    assert int(rows[0]["N"]) == 48 and int(rows[0]["N_compact"]) == 24


def test_bench_repeats_too_low_exit_2(tmp_path, capsys):
    spec_file = tmp_path / "specs.json"
    spec_file.write_text(json.dumps([{"B": 2, "P": 2, "S": 2}]))
    assert main(["bench", str(spec_file), "--repeats", "1"]) == 2
    assert "repeats" in capsys.readouterr().err


def test_bench_json_and_output_file(tmp_path, capsys):
    spec_file = tmp_path / "specs.json"
    spec_file.write_text(json.dumps([{"B": 2, "P": 4, "S": 2}]))
    out_file = tmp_path / "report.json"
    assert main(["bench", str(spec_file), "--json", "-o", str(out_file)]) == 0
    capsys.readouterr()
    payload = json.loads(out_file.read_text())
    assert payload[0]["spec"] == "B2_P4_S2"


def test_bench_pipeline_flag(tmp_path, capsys):
    spec_file = tmp_path / "specs.json"
    spec_file.write_text(json.dumps([{"B": 2, "P": 4, "S": 2}, {"B": 2, "P": 6, "S": 2}]))
    assert main(["bench", str(spec_file), "--pipeline"]) == 0
    out = capsys.readouterr().out
    assert "pipeline:" in out and "hidden_fraction" in out


def test_predict_object_and_list(tmp_path, capsys):
    single = tmp_path / "one.json"
    single.write_text(json.dumps({"d": 256, "d_int": 512, "L": 2304, "B": 32, "P": 2048, "S": 256}))
    assert main(["predict", str(single)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "f_c,r,gamma,predicted_speedup"
    assert out[1].split(",")[1] == "7.2000"

    many = tmp_path / "many.json"
    many.write_text(json.dumps([
        {"d": 1, "d_int": 1, "L": 1, "B": 1, "P": 5, "S": 5},  # r = 1
        {"d": 1, "d_int": 1, "L": 1, "B": 32, "P": 2048, "S": 256, "f_c": 0.88},
    ]))
    assert main(["predict", str(many), "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload[0]["r"] == 1.0 and payload[0]["predicted_speedup"] == 1.0
    assert abs(payload[1]["predicted_speedup"] - 4.14) <= 0.05


def test_predict_malformed_input_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["predict", str(path)]) == 2
    assert capsys.readouterr().err


def test_batch_files_shared_with_library(tmp_path, capsys):
    # CLI plan output on a library-written batch file matches build_plan
    cu = np.asarray([0, 4, 8], dtype=np.int64)
    tokens = np.asarray([9, 8, 7, 6, 9, 8, 1, 2])
    batch = RaggedBatch(tokens, default_positions(cu), cu)
    bfile, pfile = tmp_path / "b.json", tmp_path / "p.rdxp"
    save_batch(batch, bfile)
    assert main(["plan", str(bfile), "-o", str(pfile), "--binary"]) == 0
    capsys.readouterr()
    expected = build_plan(batch)
    got = load_plan(pfile)
    assert np.array_equal(got.gather_indices, expected.gather_indices)
    assert np.array_equal(got.scatter_indices, expected.scatter_indices)
