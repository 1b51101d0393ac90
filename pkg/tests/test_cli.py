import json

import numpy as np
import pytest

from mmembed import checkpoint as ckpt_io
from mmembed.cli import main
from mmembed.config import load_config
from mmembed.cpt import CptState
from mmembed.files import read_jsonl

SMALL_INI = """\
[run]
log_every = 1

[backbone]
d_model = 32
d_ff = 64

[cpt]
steps = 4
batch_size = 8
lr = 1e-3

[cl]
steps = 6
batch_size = 8
lr = 1e-3

[data]
n_text = 40
n_caption = 80
n_longform = 30
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_INI)
    base = ["--config", str(root / "small.ini")]
    assert main(["gen-data", *base, "--out", str(root / "data")]) == 0
    assert main(["cpt", *base, "--data", str(root / "data"), "--out", str(root / "cpt")]) == 0
    assert main(["finetune", *base, "--data", str(root / "data"), "--out", str(root / "cl"),
                 "--init-from", str(root / "cpt" / "cpt.ckpt")]) == 0
    return root


def _base(run_dir):
    return ["--config", str(run_dir / "small.ini")]


def test_stage_outputs(run_dir):
    for rel in ["data/caption_pairs.jsonl", "data/answer_key.jsonl", "cpt/cpt.ckpt", "cpt/cpt_metrics.jsonl",
                "cl/cl.ckpt", "cl/cl_metrics.jsonl", "cl/config.ini"]:
        assert (run_dir / rel).exists(), rel
    assert len(read_jsonl(run_dir / "cpt" / "cpt_metrics.jsonl")) == 4
    assert len(read_jsonl(run_dir / "cl" / "cl_metrics.jsonl")) == 6


def test_usage_errors_exit_one(run_dir, capsys):
    with pytest.raises(SystemExit) as info:
        main(["cpt", "--bogus"])
    assert info.value.code == 1
    assert main(["gen-data", *_base(run_dir), "--set", "cl.nope=1", "--out", str(run_dir / "x")]) == 1
    assert "nope" in capsys.readouterr().err


def test_generation_overflow_exits_two(tmp_path, capsys):
    assert main(["gen-data", "--set", "data.n_caption=1000", "--out", str(tmp_path)]) == 2
    assert "attribute" in capsys.readouterr().err


def test_missing_dataset_exits_two(tmp_path, run_dir):
    assert main(["cpt", *_base(run_dir), "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2


def test_gen_data_is_deterministic(tmp_path, run_dir):
    assert main(["gen-data", *_base(run_dir), "--out", str(tmp_path)]) == 0
    for name in ["text_pairs.jsonl", "caption_pairs.jsonl", "longform_pairs.jsonl", "answer_key.jsonl"]:
        assert (tmp_path / name).read_bytes() == (run_dir / "data" / name).read_bytes()


def test_disabled_patch_objective_logs_zero(tmp_path, run_dir):
    out = tmp_path / "cpt"
    assert main(["cpt", *_base(run_dir), "--no-mae", "--data", str(run_dir / "data"), "--out", str(out)]) == 0
    rows = read_jsonl(out / "cpt_metrics.jsonl")
    assert rows and all(r["loss_mae"] == 0 for r in rows)
    assert all(r["loss_mlm"] > 0 for r in rows)


def test_zero_steps_checkpoint_equals_init(tmp_path, run_dir):
    out = tmp_path / "cpt"
    argv = ["cpt", *_base(run_dir), "--set", "cpt.steps=0", "--data", str(run_dir / "data"), "--out", str(out)]
    assert main(argv) == 0
    cfg = load_config(run_dir / "small.ini")
    init = CptState.create(cfg.backbone, cfg.cpt_config(), seed=cfg.seed_for("init")).to_checkpoint()
    saved = ckpt_io.load(out / "cpt.ckpt")
    assert list(saved.tensors) == list(init.tensors)
    assert all(np.array_equal(saved.tensors[k], init.tensors[k]) for k in init.tensors)


def test_mixed_and_filtered_batches(tmp_path, run_dir):
    data = str(run_dir / "data")
    out = tmp_path / "mixed"
    assert main(["finetune", *_base(run_dir), "--no-task-batching", "--data", data, "--out", str(out)]) == 0
    assert any(r["task_id"] is None for r in read_jsonl(out / "cl_metrics.jsonl"))
    out = tmp_path / "notext"
    argv = ["finetune", *_base(run_dir), "--no-text-pairs", "--set", "cl.steps=20", "--data", data, "--out", str(out)]
    assert main(argv) == 0
    tasks = {r["task_id"] for r in read_jsonl(out / "cl_metrics.jsonl")}
    assert "text" not in tasks and tasks <= {"caption", "longform"}


def test_mismatched_checkpoint_reports_fields(tmp_path, run_dir, capsys):
    argv = ["finetune", *_base(run_dir), "--set", "backbone.d_model=64", "--set", "backbone.d_ff=64",
            "--data", str(run_dir / "data"), "--out", str(tmp_path), "--init-from", str(run_dir / "cpt" / "cpt.ckpt")]
    assert main(argv) == 2
    assert "d_model: checkpoint=32 config=64" in capsys.readouterr().err


def test_cpt_init_changes_final_metrics(tmp_path, run_dir):
    data = str(run_dir / "data")
    assert main(["finetune", *_base(run_dir), "--data", data, "--out", str(tmp_path / "raw")]) == 0
    raw = read_jsonl(tmp_path / "raw" / "cl_metrics.jsonl")
    cpt = read_jsonl(run_dir / "cl" / "cl_metrics.jsonl")
    assert raw[-1]["loss"] != cpt[-1]["loss"]
    results = {}
    for name, ck in [("raw", tmp_path / "raw" / "cl.ckpt"), ("cpt", run_dir / "cl" / "cl.ckpt")]:
        out = tmp_path / f"eval-{name}"
        assert main(["eval", *_base(run_dir), "--data", data, "--checkpoint", str(ck), "--out", str(out)]) == 0
        results[name] = read_jsonl(out / "results.jsonl")
    assert results["raw"] != results["cpt"]


def test_eval_is_reproducible(tmp_path, run_dir):
    args = ["eval", *_base(run_dir), "--data", str(run_dir / "data"), "--checkpoint", str(run_dir / "cl" / "cl.ckpt")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ["results.jsonl", "per_query.jsonl"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    tasks = [r["task"] for r in read_jsonl(tmp_path / "a" / "results.jsonl")]
    assert tasks == ["caption", "longform", "text"]


def _embed(run_dir, tmp_path, lines, mode="bidirectional"):
    src = tmp_path / f"in-{mode}.jsonl"
    src.write_text("".join(line + "\n" for line in lines))
    out = tmp_path / f"out-{mode}.jsonl"
    code = main(["embed", *_base(run_dir), "--checkpoint", str(run_dir / "cl" / "cl.ckpt"),
                 "--input", str(src), "--out", str(out), "--mode", mode])
    return code, out


def _seq_line(id, text, n_patches=0, value=0.5):
    images = [[[value] * 16] * n_patches] if n_patches else []
    return json.dumps({"id": id, "sequence": {"text": text, "images": images}})


def test_embed_empty_input(tmp_path, run_dir):
    code, out = _embed(run_dir, tmp_path, [])
    assert code == 0 and out.read_text() == ""


def test_embed_modes_and_dimension(tmp_path, run_dir):
    lines = [_seq_line("a", [5, 6, 7], 2), _seq_line("b", [9, 10])]
    _, bi = _embed(run_dir, tmp_path, lines, "bidirectional")
    _, ca = _embed(run_dir, tmp_path, lines, "causal")
    bi, ca = read_jsonl(bi), read_jsonl(ca)
    assert [r["id"] for r in bi] == ["a", "b"]
    assert all(len(r["vector"]) == 32 for r in bi + ca)
    assert bi[0]["vector"] != ca[0]["vector"]


def test_embed_reports_bad_lines_and_continues(tmp_path, run_dir, capsys):
    lines = [_seq_line("a", [5, 6]), "{not json", _seq_line("c", [500]), _seq_line("d", [7])]
    code, out = _embed(run_dir, tmp_path, lines)
    assert code == 2
    assert [r["id"] for r in read_jsonl(out)] == ["a", "d"]
    err = capsys.readouterr().err
    assert ":2:" in err and ":3:" in err


def test_nonfinite_input_exits_three(tmp_path, run_dir, capsys):
    code, _ = _embed(run_dir, tmp_path, [_seq_line("x", [5], 2, value=float("inf"))])
    assert code == 3
    assert "numeric" in capsys.readouterr().err
