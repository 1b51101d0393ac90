"""Synthetic heterogeneous corpus.

Three retrieval tasks, each a list of contrastive instances:

* ``text``     - paraphrase pairs over (subject, verb, object) triples; the
  query uses one synonym of each word, the positive the other synonym in a
  different template; hard negatives change exactly one slot.
* ``caption``  - caption -> image. An image is a grid of patch vectors
  generated from a (shape, color, count) tuple; the caption names the tuple.
  Hard negatives are images sharing exactly one attribute with the positive.
* ``longform`` - short query -> multi-image document. The query describes the
  document's key image and topic; hard negatives are documents on the same
  topic whose key image shares exactly one attribute.

Images are deterministic functions of their attribute tuple, so equal image
ids always mean equal content.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .contrastive import ContrastiveInstance
from .errors import GenerationError
from .files import ANSWER_KEY, TASK_FILES, write_jsonl
from .sequence import N_SPECIAL, SEP, InterleavedSequence

TASKS = ("text", "caption", "longform")

CAPTION_FILLERS = ["a", "photo", "of", "image", "showing", "there", "is", "the", "picture", "with"]
CAPTION_TEMPLATES = [
    ["a", "photo", "of", "{n}", "{c}", "{s}"],
    ["image", "showing", "{n}", "{c}", "{s}"],
    ["there", "is", "{n}", "{c}", "{s}", "in", "the", "picture"],
    ["the", "{c}", "{s}", "with", "{n}"],
]
TEXT_FILLERS = ["in", "today", "quickly", "then", "and"]
TEXT_TEMPLATES = [
    ["the", "{s}", "{v}", "the", "{o}"],
    ["today", "the", "{s}", "quickly", "{v}", "a", "{o}"],
    ["then", "a", "{s}", "{v}", "the", "{o}", "today"],
]
DOC_WORDS = ["page", "section", "figure", "report", "table", "caption"]


@dataclass
class SynthSpec:
    vocab_size: int = 128
    patch_grid: int = 4
    d_patch: int = 16
    n_shapes: int = 8
    n_colors: int = 8
    n_counts: int = 4
    n_subjects: int = 6
    n_verbs: int = 6
    n_objects: int = 6
    n_topics: int = 8
    n_text: int = 200
    n_caption: int = 240
    n_longform: int = 120
    n_hard_negatives: int = 2
    images_per_doc: int = 3
    heldout_fraction: float = 0.2
    noise: float = 0.1
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    def validate(self) -> None:
        for name in ("patch_grid", "d_patch", "n_shapes", "n_colors", "n_counts", "n_subjects",
                     "n_verbs", "n_objects", "n_topics", "images_per_doc", "n_text", "n_caption", "n_longform"):
            if getattr(self, name) < 1:
                raise GenerationError(f"{name} must be >= 1")
        if not 0 <= self.heldout_fraction < 1:
            raise GenerationError("heldout_fraction must lie in [0, 1)")
        n_attr = self.n_shapes * self.n_colors * self.n_counts
        if self.n_caption > n_attr:
            raise GenerationError(
                f"caption corpus of {self.n_caption} needs unique attribute tuples but only {n_attr} exist"
            )
        if self.n_longform > n_attr:
            raise GenerationError(
                f"long-form corpus of {self.n_longform} needs unique key images but only {n_attr} exist"
            )
        n_triples = self.n_subjects * self.n_verbs * self.n_objects
        if self.n_text > n_triples:
            raise GenerationError(f"text corpus of {self.n_text} exceeds the {n_triples} distinct triples")
        if self.n_hard_negatives and min(self.n_shapes, self.n_colors, self.n_counts) < 2:
            raise GenerationError("hard negatives need at least two values per attribute")


class Vocabulary:
    """Deterministic word -> id table above the reserved ids."""

    def __init__(self, spec: SynthSpec):
        words: list[str] = []
        words += [f"shape{i}" for i in range(spec.n_shapes)]
        words += [f"color{i}" for i in range(spec.n_colors)]
        words += [f"count{i}" for i in range(spec.n_counts)]
        words += [f"subj{i}_{k}" for i in range(spec.n_subjects) for k in range(2)]
        words += [f"verb{i}_{k}" for i in range(spec.n_verbs) for k in range(2)]
        words += [f"obj{i}_{k}" for i in range(spec.n_objects) for k in range(2)]
        words += [f"topic{i}" for i in range(spec.n_topics)]
        fillers = CAPTION_FILLERS + TEXT_FILLERS + DOC_WORDS + ["in"]
        for w in fillers:
            if w not in words:
                words.append(w)
        self.words = words
        self.ids = {w: N_SPECIAL + i for i, w in enumerate(words)}
        if N_SPECIAL + len(words) > spec.vocab_size:
            raise GenerationError(
                f"vocab_size={spec.vocab_size} too small for {N_SPECIAL + len(words)} synthetic words"
            )

    def __call__(self, words: list[str]) -> list[int]:
        return [self.ids[w] for w in words]


class ImageRenderer:
    """Patch-grid images from (shape, color, count) tuples.

    Each shape has a spatial on/off mask over the grid and a feature
    prototype; colors and counts add their own prototypes on the "on" patches.
    """

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 7919])
        D, P = spec.d_patch, spec.n_patches
        scale = 1.0 / np.sqrt(3.0)
        self.shape_masks = np.zeros((spec.n_shapes, P), dtype=bool)
        for s in range(spec.n_shapes):
            while True:
                m = rng.random(P) < 0.5
                if 0 < m.sum() < P:
                    break
            self.shape_masks[s] = m
        self.shape_proto = rng.standard_normal((spec.n_shapes, D)) * scale
        self.color_proto = rng.standard_normal((spec.n_colors, D)) * scale
        self.count_proto = rng.standard_normal((spec.n_counts, D)) * scale

    def render(self, attrs: tuple[int, int, int]) -> np.ndarray:
        s, c, n = attrs
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 104729, s, c, n])
        on = self.shape_proto[s] + self.color_proto[c] + self.count_proto[n]
        img = np.where(self.shape_masks[s][:, None], on[None, :], 0.0)
        img = img + spec.noise * rng.standard_normal(img.shape)
        return np.round(img, 6)


def image_id(attrs: tuple[int, int, int]) -> str:
    return "img-s{}-c{}-n{}".format(*attrs)


def attr_dict(attrs: tuple[int, int, int]) -> dict:
    return {"shape": int(attrs[0]), "color": int(attrs[1]), "count": int(attrs[2])}


def _share_exactly_one(pool: list[tuple], target: tuple) -> list[tuple]:
    return [t for t in pool if sum(a == b for a, b in zip(t, target)) == 1]


def _pick_negatives(rng, preferred: list[tuple], fallback: list[tuple], target: tuple, k: int,
                    rule) -> list[tuple]:
    cands = rule(preferred, target)
    if len(cands) < k:
        extra = [t for t in rule(fallback, target) if t not in cands]
        cands = cands + extra
    if len(cands) < k:
        raise GenerationError(f"cannot find {k} hard negatives for {target}")
    idx = rng.choice(len(cands), size=k, replace=False)
    return [cands[i] for i in sorted(idx)]


def _split_labels(n: int, fraction: float) -> list[str]:
    n_test = int(round(n * fraction))
    return ["train"] * (n - n_test) + ["test"] * n_test


class CorpusGenerator:
    def __init__(self, spec: SynthSpec):
        spec.validate()
        self.spec = spec
        self.vocab = Vocabulary(spec)
        self.renderer = ImageRenderer(spec)
        self.all_tuples = list(itertools.product(range(spec.n_shapes), range(spec.n_colors), range(spec.n_counts)))

    # -- text ------------------------------------------------------------
    def _sentence(self, triple, synonym: int, template: list[str]) -> list[int]:
        s, v, o = triple
        fill = {"{s}": f"subj{s}_{synonym}", "{v}": f"verb{v}_{synonym}", "{o}": f"obj{o}_{synonym}"}
        return self.vocab([fill.get(w, w) for w in template])

    def text_task(self):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 1])
        triples = list(itertools.product(range(spec.n_subjects), range(spec.n_verbs), range(spec.n_objects)))
        chosen = [triples[i] for i in rng.permutation(len(triples))[: spec.n_text]]
        splits = _split_labels(spec.n_text, spec.heldout_fraction)
        by_split = {sp: [t for t, x in zip(chosen, splits) if x == sp] for sp in ("train", "test")}
        differ_in_one = lambda pool, t: [u for u in pool if sum(a != b for a, b in zip(u, t)) == 1]  # noqa: E731
        instances, keys = [], []
        D = spec.d_patch
        for i, (triple, split) in enumerate(zip(chosen, splits)):
            iid = f"text-{i:04d}"
            tq, tp = rng.choice(len(TEXT_TEMPLATES), size=2, replace=False)
            query = InterleavedSequence.text(self._sentence(triple, 0, TEXT_TEMPLATES[tq]), D, id=f"{iid}/query")
            pos_id = "txt-{}-{}-{}".format(*triple)
            negs = _pick_negatives(rng, by_split[split], triples, triple, spec.n_hard_negatives, differ_in_one)
            docs = [InterleavedSequence.text(self._sentence(t, 1, TEXT_TEMPLATES[tp]), D) for t in [triple, *negs]]
            neg_ids = ["txt-{}-{}-{}".format(*t) for t in negs]
            instances.append(ContrastiveInstance(query, docs[0], docs[1:], "text", iid, pos_id, neg_ids, split))
            keys.append({
                "instance_id": iid,
                "task_id": "text",
                "attributes": {"subject": triple[0], "verb": triple[1], "object": triple[2]},
                "documents": {d: {"subject": t[0], "verb": t[1], "object": t[2]}
                              for d, t in zip([pos_id, *neg_ids], [triple, *negs])},
            })
        return instances, keys

    # -- caption ---------------------------------------------------------
    def caption_words(self, attrs, template: list[str]) -> list[int]:
        s, c, n = attrs
        fill = {"{s}": f"shape{s}", "{c}": f"color{c}", "{n}": f"count{n}"}
        return self.vocab([fill.get(w, w) for w in template])

    def image(self, attrs) -> InterleavedSequence:
        return InterleavedSequence.from_segments([("image", self.renderer.render(attrs))], self.spec.d_patch,
                                                 id=image_id(attrs))

    def caption_task(self):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 2])
        chosen = [self.all_tuples[i] for i in rng.permutation(len(self.all_tuples))[: spec.n_caption]]
        splits = _split_labels(spec.n_caption, spec.heldout_fraction)
        by_split = {sp: [t for t, x in zip(chosen, splits) if x == sp] for sp in ("train", "test")}
        instances, keys = [], []
        for i, (attrs, split) in enumerate(zip(chosen, splits)):
            iid = f"caption-{i:04d}"
            template = CAPTION_TEMPLATES[rng.integers(len(CAPTION_TEMPLATES))]
            query = InterleavedSequence.text(self.caption_words(attrs, template), spec.d_patch, id=f"{iid}/query")
            negs = _pick_negatives(rng, by_split[split], self.all_tuples, attrs, spec.n_hard_negatives,
                                   _share_exactly_one)
            instances.append(ContrastiveInstance(
                query, self.image(attrs), [self.image(t) for t in negs], "caption", iid,
                image_id(attrs), [image_id(t) for t in negs], split,
            ))
            keys.append({
                "instance_id": iid,
                "task_id": "caption",
                "attributes": attr_dict(attrs),
                "documents": {image_id(t): attr_dict(t) for t in [attrs, *negs]},
            })
        return instances, keys

    # -- long-form -------------------------------------------------------
    def document(self, key_attrs, topic: int, rng, doc_id: str) -> tuple[InterleavedSequence, list]:
        spec = self.spec
        others = [self.all_tuples[i] for i in rng.choice(len(self.all_tuples), size=spec.images_per_doc - 1)]
        images = list(others)
        key_slot = int(rng.integers(spec.images_per_doc))
        images.insert(key_slot, key_attrs)
        segments = [("text", self.vocab(["report", f"topic{topic}", "page"]))]
        for k, attrs in enumerate(images):
            segments.append(("image", self.renderer.render(attrs)))
            words = ["figure", "caption"] if k == key_slot else ["section", "table"]
            segments.append(("text", self.vocab(words + [f"topic{topic}"])))
        return InterleavedSequence.from_segments(segments, spec.d_patch, id=doc_id), images

    def longform_task(self):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 3])
        chosen = [self.all_tuples[i] for i in rng.permutation(len(self.all_tuples))[: spec.n_longform]]
        splits = _split_labels(spec.n_longform, spec.heldout_fraction)
        by_split = {sp: [t for t, x in zip(chosen, splits) if x == sp] for sp in ("train", "test")}
        instances, keys = [], []
        for i, (attrs, split) in enumerate(zip(chosen, splits)):
            iid = f"longform-{i:04d}"
            topic = int(rng.integers(spec.n_topics))
            s, c, n = attrs
            qwords = ["figure", "with", f"count{n}", f"color{c}", f"shape{s}", "in", f"topic{topic}", "report"]
            query = InterleavedSequence.text(self.vocab(qwords), spec.d_patch, id=f"{iid}/query")
            pos_id = f"doc-{i:04d}"
            pos, pos_imgs = self.document(attrs, topic, rng, pos_id)
            negs = _pick_negatives(rng, by_split[split], self.all_tuples, attrs, spec.n_hard_negatives,
                                   _share_exactly_one)
            neg_docs, neg_ids, neg_keys = [], [], {}
            for k, t in enumerate(negs):
                nid = f"doc-{i:04d}-neg{k}"
                d, imgs = self.document(t, topic, rng, nid)
                neg_docs.append(d)
                neg_ids.append(nid)
                neg_keys[nid] = {**attr_dict(t), "topic": topic}
            instances.append(ContrastiveInstance(query, pos, neg_docs, "longform", iid, pos_id, neg_ids, split))
            keys.append({
                "instance_id": iid,
                "task_id": "longform",
                "attributes": {**attr_dict(attrs), "topic": topic},
                "documents": {pos_id: {**attr_dict(attrs), "topic": topic}, **neg_keys},
            })
        return instances, keys

    def generate(self) -> dict[str, tuple[list[ContrastiveInstance], list[dict]]]:
        return {"text": self.text_task(), "caption": self.caption_task(), "longform": self.longform_task()}


def retrieval_files(instances: list[ContrastiveInstance]) -> tuple[list[dict], list[dict], list[dict]]:
    """Queries, de-duplicated pool and judgments for a list of held-out instances."""
    queries, pool, qrels = [], [], []
    seen: set[str] = set()
    for inst in instances:
        qid = f"{inst.instance_id}/query"
        queries.append({"id": qid, "sequence": inst.query.to_json()})
        for did, doc in zip(inst.document_ids, inst.documents):
            if did not in seen:
                seen.add(did)
                pool.append({"id": did, "sequence": doc.to_json()})
        qrels.append({"query_id": qid, "relevant": [inst.positive_id]})
    return queries, pool, qrels


def generate_corpus(spec: SynthSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write the three task files, the answer key and per-task held-out retrieval files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = CorpusGenerator(spec).generate()
    written: dict[str, Path] = {}
    all_keys = []
    for task in TASKS:
        instances, keys = data[task]
        path = out / TASK_FILES[task]
        write_jsonl(path, (inst.to_json() for inst in instances))
        written[task] = path
        all_keys.extend(keys)
        test = [inst for inst in instances if inst.split == "test"]
        if test:
            q, p, r = retrieval_files(test)
            write_jsonl(out / "eval" / task / "queries.jsonl", q)
            write_jsonl(out / "eval" / task / "pool.jsonl", p)
            write_jsonl(out / "eval" / task / "qrels.jsonl", r)
    write_jsonl(out / ANSWER_KEY, all_keys)
    write_jsonl(out / "synth_spec.jsonl", [asdict(spec)])
    written["answer_key"] = out / ANSWER_KEY
    return written


def cpt_sequences(instances: list[ContrastiveInstance]) -> list[InterleavedSequence]:
    """Flatten pairs into single interleaved sequences: positive, SEP, query."""
    out = []
    for inst in instances:
        seq = inst.positive.concat(inst.query, sep=SEP)
        seq.id = inst.instance_id
        out.append(seq)
    return out
