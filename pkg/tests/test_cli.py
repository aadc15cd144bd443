import csv
import json

from pvt.cli import main, strip_timings

# small enough to train and evaluate in a few seconds
TINY = ["--set", "scene.extent=4", "--set", "point.fc_channel=8", "--set", "point.heads=2",
        "--set", "point.pointnet_width=8", "--set", "backbone.tfm_channel=8", "--set", "backbone.tfm_heads=2",
        "--set", "backbone.mode=single_scale", "--set", "backbone.single_scale_blocks=1",
        "--set", "head.tfm_channel=8", "--set", "head.tfm_heads=2", "--set", "optim.batch=2",
        "--set", "eval.scenes=4", "--set", "eval.batch=2", "--set", "optim.warmup_steps=1"]


def _metrics(d):
    return json.loads((d / "metrics.json").read_text())


def _train(out, steps=2, seed=0, extra=()):
    return main(["train", "--out", str(out), "--seed", str(seed), "--set", f"optim.steps={steps}", *TINY, *extra])


def test_train_zero_steps_records_initial_loss(tmp_path):
    assert _train(tmp_path / "r", steps=0) == 0
    m = _metrics(tmp_path / "r")
    assert m["schema_version"] == 1 and m["command"] == "train"
    assert m["initial_loss"] == m["final_loss"]
    assert (tmp_path / "r" / "checkpoint.txt").exists() and (tmp_path / "r" / "config.txt").exists()


def test_train_is_deterministic(tmp_path):
    assert _train(tmp_path / "a", steps=3, seed=5) == 0
    assert _train(tmp_path / "b", steps=3, seed=5) == 0
    assert strip_timings(_metrics(tmp_path / "a")) == strip_timings(_metrics(tmp_path / "b"))
    assert (tmp_path / "a" / "checkpoint.txt").read_bytes() == (tmp_path / "b" / "checkpoint.txt").read_bytes()


def test_producer_threads_do_not_change_results(tmp_path, monkeypatch):
    assert _train(tmp_path / "one", steps=2, seed=1) == 0
    monkeypatch.setenv("PVT_THREADS", "3")
    assert _train(tmp_path / "three", steps=2, seed=1) == 0
    assert strip_timings(_metrics(tmp_path / "one")) == strip_timings(_metrics(tmp_path / "three"))


def test_config_file_and_set_override(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# toy\noptim.steps=1\neval.scenes=0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), *TINY,
                 "--set", "eval.scenes=0"]) == 0
    m = _metrics(tmp_path / "r")
    assert m["config"]["optim.steps"] == 1 and "eval" not in m


def test_bad_config_exits_with_contract_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "r"), "--set", "no.such.key=1"]) == 2
    assert "no.such.key" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "r"), "--set", "optim.steps=many"]) == 2


def test_eval_reproducible_and_checks_checkpoint(tmp_path):
    run = tmp_path / "run"
    assert _train(run, steps=1) == 0
    ck = str(run / "checkpoint.txt")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e1"), *TINY]) == 0
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e2"), *TINY]) == 0
    e1, e2 = _metrics(tmp_path / "e1"), _metrics(tmp_path / "e2")
    assert strip_timings(e1) == strip_timings(e2)
    assert e1["eval"] == strip_timings(_metrics(run)["eval"])
    # a checkpoint for a different width must be refused
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e3"), *TINY,
                 "--set", "head.tfm_channel=16"]) == 2


def test_sample_arch_point_enumeration(tmp_path):
    assert main(["sample-arch", "--space", "point", "--enumerate", "--no-check", "--out", str(tmp_path)]) == 0
    m = _metrics(tmp_path)
    assert m["count"] == 15 and len(list((tmp_path / "specs").glob("spec_*.txt"))) == 15


def test_sample_arch_voxel_with_forward_check(tmp_path):
    assert main(["sample-arch", "--space", "voxel", "--count", "2", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["sample-arch", "--space", "voxel", "--count", "2", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a, b = _metrics(tmp_path / "a"), _metrics(tmp_path / "b")
    assert a["all_ok"] and strip_timings(a) == strip_timings(b)


def test_report_sorts_by_flops_and_flags_corrupt_dirs(tmp_path):
    assert _train(tmp_path / "small", steps=0) == 0
    assert _train(tmp_path / "big", steps=0, extra=["--set", "head.tfm_channel=16"]) == 0
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "metrics.json").write_text("{not json")
    dirs = [str(tmp_path / n) for n in ("big", "junk", "small")]
    assert main(["report", *dirs, "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "report.csv")))
    assert [r["run"] for r in rows] == ["small", "big", "junk"]
    assert rows[2]["status"] == "corrupt"
    assert float(rows[0]["gflops"]) < float(rows[1]["gflops"])
    first = (tmp_path / "rep" / "report.csv").read_bytes()
    assert main(["report", *dirs, "--out", str(tmp_path / "rep2")]) == 0
    assert (tmp_path / "rep2" / "report.csv").read_bytes() == first


def test_report_single_run(tmp_path):
    assert _train(tmp_path / "only", steps=0) == 0
    assert main(["report", str(tmp_path / "only"), "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "report.csv")))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert main(["report", "--out", str(tmp_path / "rep")]) == 2


def test_bench_tiny(tmp_path):
    assert main(["bench-voxelize", "--preset", "tiny", "--repeats", "1", "--out", str(tmp_path)]) == 0
    m = _metrics(tmp_path)
    assert m["equivalent"]
    assert {r["batch"] for r in m["timings"]["rows"]} == {1, 2, 4}
    assert "reference_tpu_ms" in m
