"""Byte-level tokenizer, JSONL ingestion, and the two synthetic task
generators: multiple-choice fact lookup (knowledge genre) and strict bracketed
entity extraction (alignment genre).

Generators are pure functions of (n, seed).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng


class IngestError(Exception):
    pass


class CapacityError(Exception):
    pass


class TruncationError(Exception):
    pass


BOS, EOS, PAD, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260


class Tokenizer:
    vocab_size = VOCAB_SIZE
    BOS, EOS, PAD, SEP = BOS, EOS, PAD, SEP

    def tokenize(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def detokenize(self, ids) -> str:
        # special ids inside a span decode to nothing (model output can be junk)
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass
class Sample:
    input: str
    target: str
    task: str  # "knowledge" | "alignment"
    options: list[str] | None = None

    def to_json(self) -> str:
        d = {"input": self.input, "target": self.target, "task": self.task}
        if self.options is not None:
            d["options"] = self.options
        return json.dumps(d, ensure_ascii=False)


# -- invented-world vocabulary ------------------------------------------------

_SYLLABLES = ["ba", "re", "mi", "to", "lu", "ka", "zen", "vor", "pli", "dro",
              "sha", "gu", "nep", "tir", "os", "wex", "fam", "hyl", "quo", "jin"]

ENTITY_TYPES = ("PER", "LOC", "OBJ")
_FILLERS = ["the", "a", "near", "with", "saw", "met", "old", "small", "went",
            "to", "by", "and", "held", "under", "past", "found", "left", "at"]

# the entity vocabulary is a fixed world constant shared by every generated
# corpus, so typing an entity is learnable across pretraining and fine-tuning
_VOCAB_SEED = 900913


def _make_name(rng: Rng, n_syll: int) -> str:
    g = rng.generator()
    return "".join(_SYLLABLES[g.integers(0, len(_SYLLABLES))] for _ in range(n_syll))


def _make_names(rng: Rng, count: int, n_syll: int, taken: set[str]) -> list[str]:
    names = []
    i = 0
    while len(names) < count:
        name = _make_name(rng.child(str(i)), n_syll)
        i += 1
        if name not in taken:
            taken.add(name)
            names.append(name)
    return names


def entity_vocab() -> dict[str, list[str]]:
    rng = Rng(_VOCAB_SEED)
    taken = set(_FILLERS)
    return {t: _make_names(rng.child("type/" + t), 30, 2, taken) for t in ENTITY_TYPES}


# -- knowledge task -----------------------------------------------------------

RELATIONS = ("color", "totem", "craft", "fuel", "rival", "motto")


@dataclass
class FactTable:
    """Seeded (subject, relation, object) triples; the knowledge 'world'."""

    seed: int
    triples: list[tuple[str, str, str]]
    pools: dict[str, list[str]]  # relation -> candidate objects

    @staticmethod
    def generate(seed: int, n_facts: int = 200) -> "FactTable":
        rng = Rng(seed).child("facts")
        taken: set[str] = set(_FILLERS)
        subjects = _make_names(rng.child("subjects"), n_facts, 3, taken)
        pools = {rel: _make_names(rng.child("pool/" + rel), 12, 2, taken)
                 for rel in RELATIONS}
        triples = []
        seen = set()
        for i, subj in enumerate(subjects):
            g = rng.child(f"triple{i}").generator()
            rel = RELATIONS[g.integers(0, len(RELATIONS))]
            obj = pools[rel][g.integers(0, len(pools[rel]))]
            if (subj, rel) in seen:
                continue
            seen.add((subj, rel))
            triples.append((subj, rel, obj))
        return FactTable(seed=seed, triples=triples, pools=pools)


def gen_knowledge_task(n: int, seed: int, facts: FactTable | None = None
                       ) -> tuple[list[Sample], FactTable]:
    """n distinct 4-option fact lookups over a shared fact table.

    The target is the stored object itself; options are candidate objects
    scored by continuation likelihood. Identity of a question is
    (subject, relation, ordered option tuple); all n are pairwise distinct.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if facts is None:
        facts = FactTable.generate(seed)
    rng = Rng(seed).child("knowledge")
    samples: list[Sample] = []
    seen: set[tuple] = set()
    i = 0
    attempts = 0
    while len(samples) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise CapacityError(f"cannot produce {n} distinct questions from {len(facts.triples)} facts")
        g = rng.child(f"q{i}").generator()
        i += 1
        subj, rel, obj = facts.triples[g.integers(0, len(facts.triples))]
        pool = [o for o in facts.pools[rel] if o != obj]
        distractors = [pool[j] for j in g.choice(len(pool), size=3, replace=False)]
        options = distractors + [obj]
        order = g.permutation(4)
        options = [options[j] for j in order]
        ident = (subj, rel, tuple(options))
        if ident in seen:
            continue
        seen.add(ident)
        samples.append(Sample(input=f"{rel} of {subj}?", target=obj,
                              task="knowledge", options=options))
    return samples, facts


# -- alignment task -----------------------------------------------------------

_BRACKET_RE = re.compile(r"\[([A-Z]+):([^\[\]]*)\]")


def parse_brackets(s: str) -> list[tuple[str, str]]:
    """'[PER:x][LOC:y]' -> [(PER, x), (LOC, y)]; '[NONE]' or junk -> []."""
    return [(m.group(1), m.group(2)) for m in _BRACKET_RE.finditer(s)
            if m.group(1) != "NONE"]


def gen_alignment_task(n: int, seed: int) -> list[Sample]:
    """n distinct extraction samples: short filler sentence embedding 0-2 typed
    entities; target is the strict bracketed sequence in order of appearance."""
    if n < 1:
        raise ValueError("n must be >= 1")
    vocab = entity_vocab()
    rng = Rng(seed).child("alignment")
    samples: list[Sample] = []
    seen: set[str] = set()
    i = 0
    while len(samples) < n:
        g = rng.child(f"s{i}").generator()
        i += 1
        n_ent = int(g.integers(0, 3))  # 0 entities exercises the [NONE] path
        words: list[str] = []
        ents: list[tuple[str, str]] = []
        n_fill = int(g.integers(3, 6))
        slots = sorted(g.choice(n_fill + 1, size=n_ent, replace=False)) if n_ent else []
        si = 0
        for w in range(n_fill + 1):
            while si < n_ent and slots[si] == w:
                etype = ENTITY_TYPES[g.integers(0, len(ENTITY_TYPES))]
                name = vocab[etype][g.integers(0, len(vocab[etype]))]
                words.append(name)
                ents.append((etype, name))
                si += 1
            if w < n_fill:
                words.append(_FILLERS[g.integers(0, len(_FILLERS))])
        prompt = " ".join(words) + " ."
        if prompt in seen:
            continue
        seen.add(prompt)
        target = "".join(f"[{t}:{s}]" for t, s in ents) if ents else "[NONE]"
        samples.append(Sample(input=prompt, target=target, task="alignment"))
    return samples


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray     # (B, L) int32, BOS input SEP target EOS, PAD right
    loss_mask: np.ndarray  # (B, L) bool, true exactly on target bytes and EOS


def encode_sample(sample: Sample, tok: Tokenizer) -> tuple[list[int], int]:
    """Token ids plus the index of the first target position."""
    ids = [BOS] + tok.tokenize(sample.input) + [SEP]
    start = len(ids)
    ids += tok.tokenize(sample.target) + [EOS]
    return ids, start


def build_batch(samples: list[Sample], tok: Tokenizer, max_len: int) -> Batch:
    encoded = []
    for s in samples:
        ids, start = encode_sample(s, tok)
        if len(ids) > max_len:
            raise TruncationError(f"sample of {len(ids)} tokens exceeds max_len {max_len}")
        encoded.append((ids, start))
    L = max(len(ids) for ids, _ in encoded)
    tokens = np.full((len(encoded), L), PAD, dtype=np.int32)
    mask = np.zeros((len(encoded), L), dtype=bool)
    for r, (ids, start) in enumerate(encoded):
        tokens[r, :len(ids)] = ids
        mask[r, start:len(ids)] = True
    return Batch(tokens=tokens, loss_mask=mask)


# -- JSONL --------------------------------------------------------------------

def save_jsonl(samples: list[Sample], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


def load_jsonl(path: str) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}: line {lineno}: invalid JSON ({e})") from e
            for key in ("input", "target", "task"):
                if key not in d:
                    raise IngestError(f"{path}: line {lineno}: missing field '{key}'")
            if d["task"] not in ("knowledge", "alignment"):
                raise IngestError(f"{path}: line {lineno}: unknown task tag '{d['task']}'")
            samples.append(Sample(input=d["input"], target=d["target"],
                                  task=d["task"], options=d.get("options")))
    return samples
