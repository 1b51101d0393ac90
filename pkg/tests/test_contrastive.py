import math

import numpy as np
import pytest
import torch

from mmembed.backbone import BackboneConfig
from mmembed.contrastive import (
    Batch,
    ClConfig,
    ClState,
    ContrastiveInstance,
    candidate_mask,
    cl_train_step,
    contrastive_loss,
    embed_bidirectional,
    embed_causal,
    info_nce,
    log_similarity,
    similarity,
    task_aware_batches,
)
from mmembed.errors import InputError
from mmembed.files import read_instances
from mmembed.sequence import EOS, InterleavedSequence, SequenceBatch
from helpers import TINY, random_instances, tiny_backbone
from oracles import random_sequence


class _FixedHidden(torch.nn.Module):
    """Stands in for a backbone and returns preset hidden rows."""

    def __init__(self, rows):
        super().__init__()
        self.rows = torch.as_tensor(rows, dtype=torch.float64)
        self.config = TINY

    def collate(self, seqs):
        return SequenceBatch.collate(seqs, dtype=torch.float64)

    def forward(self, batch, mode):
        T = batch.token_ids.shape[1]
        return self.rows[None, :T].expand(batch.token_ids.shape[0], -1, -1)


def test_mean_pool_arithmetic():
    model = _FixedHidden([[1.0, 2.0], [3.0, 4.0]])
    emb = embed_bidirectional(model, InterleavedSequence.text([5, 6], 8))
    assert emb.tolist() == [2.0, 3.0]
    emb = embed_bidirectional(model, InterleavedSequence.text([5], 8))
    assert emb.tolist() == [1.0, 2.0]


def test_mean_pool_ignores_padding():
    bb = tiny_backbone()
    rng = np.random.default_rng(0)
    s = random_sequence(rng, n_text=3, images=(2,))
    long = random_sequence(rng, n_text=10, images=(6,))
    with torch.no_grad():
        alone = embed_bidirectional(bb, s)
        batched = embed_bidirectional(bb, [long, s])[1]
    torch.testing.assert_close(batched, alone, rtol=1e-6, atol=1e-6)


def test_causal_embedding_reads_eos_row():
    bb = tiny_backbone()
    s = InterleavedSequence.text([5, 6, 7], 8)
    with torch.no_grad():
        hidden = bb(s.with_eos(), "causal")
        emb = embed_causal(bb, s)
    assert s.with_eos().token_ids[-1] == EOS
    assert torch.equal(emb, hidden[-1])


def test_causal_embedding_sees_content_and_ignores_padding():
    bb = tiny_backbone(seed=1)
    s = InterleavedSequence.text([5, 6, 7], 8)
    t = InterleavedSequence.text([9, 6, 7], 8)
    long = InterleavedSequence.text(list(range(4, 20)), 8)
    with torch.no_grad():
        a, b = embed_causal(bb, s), embed_causal(bb, t)
        padded = embed_causal(bb, [long, s])[1]
    assert not torch.equal(a, b)
    torch.testing.assert_close(padded, a, rtol=1e-6, atol=1e-6)


def test_similarity_values():
    a = torch.tensor([1.0, 2.0, 0.5], dtype=torch.float64)
    assert abs(similarity(a, a, 1.0).item() - math.e) < 1e-12
    assert abs(similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0]), 1.0).item() - 1.0) < 1e-7
    b = torch.tensor([1.0, 0.0], dtype=torch.float64)
    c = torch.tensor([0.5, math.sqrt(3) / 2], dtype=torch.float64)
    assert abs(log_similarity(b, c, 0.03).item() - 0.5 / 0.03) < 1e-9
    with pytest.raises(InputError):
        log_similarity(b, torch.zeros(2, dtype=torch.float64), 1.0)


def _loss(q, docs, owner, ids, pos, tau=1.0, dedup=True):
    to = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
    return info_nce(to(q), to(docs), owner, ids, pos, tau, dedup)


def test_equal_cosines_give_log_four():
    v = [1.0, 0.0]
    out = _loss([v, v], [v, v, v, v], [0, 0, 1, 1], ["a+", "a-", "b+", "b-"], [0, 2], tau=0.03)
    assert out.candidates.sum(1).tolist() == [4, 4]
    assert abs(out.loss.item() - math.log(4)) < 1e-12


def test_direct_evaluation_with_three_orthogonal_candidates():
    out = _loss([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, -1.0]], [0, 0, 0, 0],
                ["p", "n0", "n1", "n2"], [0])
    assert abs(out.loss.item() - math.log((math.e + 3) / math.e)) < 1e-12
    assert abs(out.loss.item() - 0.7437) < 1e-4


def test_single_candidate_gives_zero_loss():
    out = _loss([[1.0, 2.0]], [[0.3, -1.0]], [0], ["p"], [0], tau=0.03)
    assert out.loss.item() == 0.0


def test_log_space_agrees_with_direct_formula():
    rng = np.random.default_rng(0)
    q, d = rng.standard_normal((3, 5)), rng.standard_normal((9, 5))
    owner = [0, 0, 0, 1, 1, 1, 2, 2, 2]
    ids = [f"d{j}" for j in range(9)]
    out = _loss(q, d, owner, ids, [0, 3, 6])
    cos = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ (d / np.linalg.norm(d, axis=1, keepdims=True)).T
    direct = np.mean([-math.log(math.exp(cos[b, 3 * b]) / np.exp(cos[b]).sum()) for b in range(3)])
    assert abs(out.loss.item() - direct) < 1e-12


def test_small_temperature_stays_finite():
    q = [[1.0, 0.0]]
    out = _loss(q, [[1.0, 0.0], [-1.0, 0.0]], [0, 0], ["p", "n"], [0], tau=1e-4)
    assert math.isfinite(out.loss.item())


def test_dedup_removes_copies_of_own_positive():
    # instance 1 lists instance 0's positive as its own positive
    mask = candidate_mask([0, 0, 1, 1], ["x", "n0", "x", "n1"], [0, 2], dedup=True)
    assert mask.tolist() == [[True, True, False, True], [False, True, True, True]]
    assert candidate_mask([0, 0, 1, 1], ["x", "n0", "x", "n1"], [0, 2], dedup=False).all()


def test_scale_invariance():
    bb = tiny_backbone(dtype="float64")
    insts = random_instances(np.random.default_rng(0), 3)
    with torch.no_grad():
        base = contrastive_loss(insts, bb)
        q = embed_bidirectional(bb, [i.query for i in insts])
        docs = [d for i in insts for d in i.documents]
        d = embed_bidirectional(bb, docs)
        owner = [b for b, i in enumerate(insts) for _ in i.documents]
        ids = [x for i in insts for x in i.document_ids]
        q[1] *= 7.5
        d[4] *= 0.01
        scaled = info_nce(q, d, owner, ids, base.positive_col.tolist(), 0.03)
    assert abs(scaled.loss.item() - base.loss.item()) < 1e-5


def test_denominator_counts_every_document():
    insts = random_instances(np.random.default_rng(1), 4, k=2)
    out = contrastive_loss(insts, tiny_backbone())
    assert out.candidates.sum(1).tolist() == [12] * 4


def test_instance_validation():
    s = InterleavedSequence.text([5], 8)
    with pytest.raises(InputError):
        ContrastiveInstance(s, s, [s], "", "i")
    with pytest.raises(InputError):
        ContrastiveInstance(s, s, [s], "t", "i", positive_id="p", negative_ids=["p"])


def test_instance_json_round_trip():
    inst = random_instances(np.random.default_rng(2), 1)[0]
    back = ContrastiveInstance.from_json(inst.to_json(), 8)
    assert back.document_ids == inst.document_ids
    assert back.query.id == "i0/query"
    assert np.array_equal(back.negatives[1].patches, inst.negatives[1].patches)


# -- batching --------------------------------------------------------------


def _dataset(sizes):
    s = InterleavedSequence.text([5], 8)
    return [ContrastiveInstance(s, s, [], task, f"{task}{i}") for task, n in sizes.items() for i in range(n)]


def test_task_aware_batch_sizes():
    batches = list(task_aware_batches(_dataset({"A": 100, "B": 60}), 32, np.random.default_rng(0)))
    sizes = {"A": [], "B": []}
    for b in batches:
        tasks = {i.task_id for i in b.instances}
        assert tasks == {b.task_id}
        sizes[b.task_id].append(len(b))
    assert sorted(sizes["A"]) == [4, 32, 32, 32]
    assert sorted(sizes["B"]) == [28, 32]


def test_single_task_is_plain_batching():
    batches = list(task_aware_batches(_dataset({"A": 10}), 4, np.random.default_rng(0)))
    assert sorted(len(b) for b in batches) == [2, 4, 4]
    assert {b.task_id for b in batches} == {"A"}
    assert sorted(i.instance_id for b in batches for i in b.instances) == sorted(f"A{i}" for i in range(10))


def test_mixed_batching_when_disabled():
    data = _dataset({"A": 50, "B": 50, "C": 50})
    batches = list(task_aware_batches(data, 16, np.random.default_rng(0), task_aware=False))
    assert any(b.task_id is None for b in batches)


def test_drop_last_and_tiny_batch_warning():
    batches = list(task_aware_batches(_dataset({"A": 10}), 4, np.random.default_rng(0), drop_last=True))
    assert [len(b) for b in batches] == [4, 4]
    with pytest.warns(UserWarning):
        list(task_aware_batches(_dataset({"A": 3}), 1, np.random.default_rng(0)))


# -- training --------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters():
    st = ClState.create(TINY, ClConfig(lr=0.0), seed=0)
    before = {k: v.clone() for k, v in st.backbone.state_dict().items()}
    cl_train_step(st, random_instances(np.random.default_rng(0), 3))
    for k, v in st.backbone.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_batch_of_one_without_negatives():
    st = ClState.create(TINY, ClConfig(), seed=0)
    out = cl_train_step(st, random_instances(np.random.default_rng(0), 1, k=0))
    assert out["loss"] == 0.0 and out["cos_neg"] is None


def test_same_seed_same_metrics():
    def run():
        st = ClState.create(TINY, ClConfig(lr=1e-3), seed=0)
        rng = np.random.default_rng(5)
        return [cl_train_step(st, Batch("t", random_instances(rng, 4))) for _ in range(3)]

    assert run() == run()


def test_caption_training_widens_similarity_gap(small_corpus):
    data = read_instances(small_corpus / "caption_pairs.jsonl", 16, split="train")
    cfg = ClConfig(lr=1e-4, batch_size=16)
    st = ClState.create(BackboneConfig(d_model=32, d_ff=64), cfg, seed=0)
    rng = np.random.default_rng(0)
    gaps = []
    for _ in range(300):
        idx = rng.choice(len(data), size=cfg.batch_size, replace=False)
        m = cl_train_step(st, [data[i] for i in idx])
        gaps.append(m["cos_pos"] - m["cos_neg"])
    slope = np.polyfit(np.arange(len(gaps)), gaps, 1)[0]
    assert slope > 0, slope
