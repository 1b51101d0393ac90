"""Stage runners shared by the CLI and the tests: data, CPT, fine-tuning, evaluation, export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .backbone import Backbone
from .config import RunConfig
from .contrastive import ClState, batch_stream, cl_train_step, embed
from .cpt import CptState, cpt_train_step, mask_sequences, warn_if_degenerate
from .errors import InputError
from .evaluation import RetrievalTask, evaluate
from .files import TASK_FILES, JsonlWriter, read_instances, write_jsonl
from .packing import CostModel
from .sequence import InterleavedSequence
from .synth import cpt_sequences, generate_corpus

log = logging.getLogger(__name__)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def gen_data(config: RunConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    written = generate_corpus(config.synth_spec(), out)
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    return written


def load_train_instances(config: RunConfig, data_dir: str | Path, tasks: list[str]):
    data_dir = Path(data_dir)
    out = []
    for task in tasks:
        path = _require(data_dir / TASK_FILES[task], f"{task} task file")
        out.extend(read_instances(path, config.backbone.d_patch, split="train"))
    if not out:
        raise InputError(f"no training instances in {data_dir}")
    return out


@dataclass
class StageResult:
    checkpoint: Path
    metrics: Path
    last: dict


def run_cpt(config: RunConfig, data_dir: str | Path, out_dir: str | Path) -> StageResult:
    """Continual pre-training on the train split of all three tasks, flattened to single sequences."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cpt_cfg = config.cpt_config()
    warn_if_degenerate(cpt_cfg)
    seqs = cpt_sequences(load_train_instances(config, data_dir, ["text", "caption", "longform"]))
    state = CptState.create(config.backbone, cpt_cfg, seed=config.seed_for("init"))
    rng = np.random.default_rng(cpt_cfg.seed)
    batch_size = min(cpt_cfg.batch_size, len(seqs))
    cost_model = CostModel()
    last: dict = {}
    with JsonlWriter(out / "cpt_metrics.jsonl") as metrics:
        for _ in range(cpt_cfg.steps):
            idx = rng.choice(len(seqs), size=batch_size, replace=False)
            batch = mask_sequences([seqs[i] for i in idx], cpt_cfg, rng)
            last = cpt_train_step(state, batch, cost_model)
            metrics.write(last)
            if state.step % config.run.log_every == 0:
                log.info("cpt step %d loss %.4f (mlm %.4f, mae %.4f)",
                         last["step"], last["loss"], last["loss_mlm"], last["loss_mae"])
    path = out / "cpt.ckpt"
    ckpt_io.save(state.to_checkpoint(), path)
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    return StageResult(path, out / "cpt_metrics.jsonl", last)


def check_compatible(config: RunConfig, ckpt: ckpt_io.Checkpoint) -> None:
    diff = ckpt_io.config_diff(ckpt.config, config.backbone)
    if diff:
        raise InputError("checkpoint does not match the backbone config:\n  " + "\n  ".join(diff))


def run_finetune(
    config: RunConfig, data_dir: str | Path, out_dir: str | Path, init_from: str | Path | None = None
) -> StageResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cl_cfg = config.cl_config()
    init = None
    if init_from is not None:
        init = ckpt_io.load(_require(Path(init_from), "init checkpoint"))
        check_compatible(config, init)
    dataset = load_train_instances(config, data_dir, config.enabled_tasks())
    state = ClState.create(config.backbone, cl_cfg, seed=config.seed_for("init"), init=init)
    stream = batch_stream(dataset, cl_cfg, np.random.default_rng(cl_cfg.seed))
    last: dict = {}
    with JsonlWriter(out / "cl_metrics.jsonl") as metrics:
        for _ in range(cl_cfg.steps):
            last = cl_train_step(state, next(stream))
            metrics.write(last)
            if state.step % config.run.log_every == 0:
                log.info("cl step %d loss %.4f cos+ %.3f cos- %s", last["step"], last["loss"],
                         last["cos_pos"], last["cos_neg"])
    path = out / "cl.ckpt"
    ckpt_io.save(state.to_checkpoint(), path)
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    return StageResult(path, out / "cl_metrics.jsonl", last)


def load_backbone(config: RunConfig, checkpoint: str | Path) -> Backbone:
    ckpt = ckpt_io.load(_require(Path(checkpoint), "checkpoint"))
    check_compatible(config, ckpt)
    backbone = Backbone(config.backbone)
    ckpt_io.load_module_state(backbone, ckpt.subset("backbone"))
    backbone.eval()
    return backbone


def find_tasks(data_dir: str | Path) -> list[Path]:
    root = Path(data_dir) / "eval"
    return sorted(p for p in root.iterdir() if (p / "qrels.jsonl").exists()) if root.exists() else []


def run_eval(
    config: RunConfig,
    checkpoint: str | Path,
    task_dirs: list[str | Path],
    out_dir: str | Path,
    mode: str = "bidirectional",
) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = load_backbone(config, checkpoint)
    if not task_dirs:
        raise InputError("no retrieval tasks to evaluate")
    records, details = [], []
    for d in task_dirs:
        task = RetrievalTask.from_dir(_require(Path(d), "task directory"), config.backbone.d_patch)
        record, detail = evaluate(task, backbone, mode)
        record["mode"] = mode
        records.append(record)
        details.extend(detail)
    write_jsonl(out / "results.jsonl", records)
    write_jsonl(out / "per_query.jsonl", details)
    return records


def run_embed(
    config: RunConfig, checkpoint: str | Path, input_path: str | Path, output_path: str | Path,
    mode: str = "bidirectional", batch_size: int = 64,
) -> list[str]:
    """Embed every valid line of ``input_path``; returns per-line error messages."""
    backbone = load_backbone(config, checkpoint)
    errors: list[str] = []
    items: list[tuple[str, InterleavedSequence]] = []
    lines = _require(Path(input_path), "input file").read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise InputError("line is not a JSON object")
            seq_obj = rec.get("sequence", rec)
            seq = InterleavedSequence.from_json(seq_obj, config.backbone.d_patch, id=str(rec.get("id", lineno)))
            seq.validate(config.backbone.vocab_size, config.backbone.d_patch)
            if len(seq) + (mode == "causal") > config.backbone.max_len:
                raise InputError(f"length {len(seq)} exceeds max_len")
            items.append((seq.id, seq))
        except (InputError, KeyError, TypeError, ValueError) as exc:
            errors.append(f"{input_path}:{lineno}: {exc}")
    rows = []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            vecs = embed(backbone, [s for _, s in chunk], mode).double().numpy()
            rows.extend({"id": i, "vector": v.tolist()} for (i, _), v in zip(chunk, vecs))
    write_jsonl(output_path, rows)
    return errors
