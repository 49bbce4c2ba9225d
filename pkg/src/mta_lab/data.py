"""Synthetic multi-task data: three task families behind one prompt format.

Families (each trivially solvable by a closed-form oracle, so routing tests
measure routing and not task difficulty):

  CLS  "classify: pos f3 neg pos ..."          -> majority marker label
  NLI  "infer: premise: t01 t07 hypothesis: t07" -> set relation label
  GEN  "reverse: t12 t03 t44"                  -> the sequence reversed

Everything is word-level over a closed vocabulary; every input starts with
the start marker token and every target ends with the end token.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GenerationError,
    InputError,
    ParseError,
    TokenizationError,
)

PAD_TOKEN = "<pad>"
START_TOKEN = "<start>"
EOS_TOKEN = "</s>"

PROMPT_WORDS = ["classify:", "infer:", "reverse:", "premise:", "hypothesis:"]
LABEL_WORDS = ["positive", "negative", "entailment", "contradiction", "neutral"]
MARKER_WORDS = ["pos", "neg"]
FILLER_WORDS = [f"f{i}" for i in range(8)]
ITEM_WORDS = [f"t{i:02d}" for i in range(97)]

VOCAB: list[str] = (
    [PAD_TOKEN, START_TOKEN, EOS_TOKEN]
    + PROMPT_WORDS
    + LABEL_WORDS
    + MARKER_WORDS
    + FILLER_WORDS
    + ITEM_WORDS
)

PAD_ID = VOCAB.index(PAD_TOKEN)
START_ID = VOCAB.index(START_TOKEN)
EOS_ID = VOCAB.index(EOS_TOKEN)


class Tokenizer:
    """Word-level closed-vocabulary tokenizer; encode/decode are inverses."""

    def __init__(self, vocab: list[str] | None = None):
        self.vocab = list(vocab) if vocab is not None else list(VOCAB)
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self._index[PAD_TOKEN]
        self.start_id = self._index[START_TOKEN]
        self.eos_id = self._index[EOS_TOKEN]

    def __len__(self):
        return len(self.vocab)

    def encode(self, text) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        ids = []
        for w in words:
            if w not in self._index:
                raise TokenizationError(f"token {w!r} is not in the vocabulary")
            ids.append(self._index[w])
        return ids

    def decode(self, ids, skip_special: bool = False) -> str:
        words = []
        special = {self.pad_id, self.start_id, self.eos_id}
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.vocab):
                raise TokenizationError(f"id {i} is outside the vocabulary")
            if skip_special and i in special:
                continue
            words.append(self.vocab[i])
        return " ".join(words)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    task_type: str                 # "CLS" | "NLI" | "GEN"
    prompt_prefix: str
    seq_len_min: int = 4
    seq_len_max: int = 12
    labels: tuple[str, ...] = ()

    def fingerprint_fields(self):
        return {
            "task_id": self.task_id,
            "task_type": self.task_type,
            "prompt_prefix": self.prompt_prefix,
            "seq_len_min": self.seq_len_min,
            "seq_len_max": self.seq_len_max,
            "labels": list(self.labels),
        }


def default_task_specs(seq_len_min: int = 4, seq_len_max: int = 12) -> list[TaskSpec]:
    return [
        TaskSpec(0, "CLS", "classify:", seq_len_min, seq_len_max,
                 ("positive", "negative")),
        TaskSpec(1, "NLI", "infer:", seq_len_min, seq_len_max,
                 ("entailment", "contradiction", "neutral")),
        TaskSpec(2, "GEN", "reverse:", seq_len_min, seq_len_max, ()),
    ]


def spec_fingerprint(specs: list[TaskSpec], vocab: list[str] | None = None) -> str:
    payload = {
        "specs": [s.fingerprint_fields() for s in specs],
        "vocab": vocab if vocab is not None else VOCAB,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Example:
    task_id: int
    input_ids: list[int] = field(repr=False)
    target_ids: list[int] = field(repr=False)
    raw_input: str = ""
    raw_target: str = ""


# -- oracles (ground truth by construction) ----------------------------------


def cls_oracle(tokens) -> str:
    n_pos = sum(1 for t in tokens if t == "pos")
    n_neg = sum(1 for t in tokens if t == "neg")
    if n_pos == n_neg:
        raise GenerationError("classification sample has tied marker counts")
    return "positive" if n_pos > n_neg else "negative"


def nli_oracle(premise, hypothesis) -> str:
    a, b = set(premise), set(hypothesis)
    if b <= a:
        return "entailment"
    if not (a & b):
        return "contradiction"
    return "neutral"


def gen_oracle(tokens) -> list[str]:
    return list(reversed(list(tokens)))


# -- generators ---------------------------------------------------------------


def _gen_cls(rng: np.random.Generator, spec: TaskSpec, label: str):
    lo, hi = spec.seq_len_min, spec.seq_len_max
    n_markers = int(rng.choice([m for m in range(3, hi + 1, 2) if m <= hi]))
    total = int(rng.integers(max(lo, n_markers), hi + 1))
    majority = n_markers // 2 + 1 + int(rng.integers(0, n_markers - n_markers // 2))
    majority = min(majority, n_markers)
    win, lose = ("pos", "neg") if label == "positive" else ("neg", "pos")
    tokens = [win] * majority + [lose] * (n_markers - majority)
    tokens += [FILLER_WORDS[int(rng.integers(0, len(FILLER_WORDS)))]
               for _ in range(total - n_markers)]
    rng.shuffle(tokens)
    assert cls_oracle(tokens) == label
    return " ".join(tokens), label


def _gen_nli(rng: np.random.Generator, spec: TaskSpec, label: str):
    a_size = int(rng.integers(2, 5))
    b_size = int(rng.integers(1, min(4, a_size) + 1))
    pool = ITEM_WORDS
    if label == "contradiction" and a_size + b_size > len(pool):
        raise GenerationError(
            f"cannot draw {a_size}+{b_size} disjoint items from a pool of {len(pool)}"
        )
    a = [pool[i] for i in rng.choice(len(pool), size=a_size, replace=False)]
    if label == "entailment":
        b = [a[i] for i in rng.choice(a_size, size=min(b_size, a_size), replace=False)]
    elif label == "contradiction":
        rest = [w for w in pool if w not in a]
        b = [rest[i] for i in rng.choice(len(rest), size=b_size, replace=False)]
    else:  # neutral: at least one shared and one novel item
        if b_size < 2:
            b_size = 2
        shared = a[int(rng.integers(0, a_size))]
        rest = [w for w in pool if w not in a]
        novel = [rest[i] for i in rng.choice(len(rest), size=b_size - 1, replace=False)]
        b = [shared] + novel
        rng.shuffle(b)
    assert nli_oracle(a, b) == label
    body = "premise: " + " ".join(a) + " hypothesis: " + " ".join(b)
    return body, label


def _gen_rev(rng: np.random.Generator, spec: TaskSpec):
    n = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
    tokens = [ITEM_WORDS[i] for i in rng.integers(0, len(ITEM_WORDS), size=n)]
    return " ".join(tokens), " ".join(gen_oracle(tokens))


def format_with_prompt(raw_body: str, raw_target: str, spec: TaskSpec,
                       tokenizer: Tokenizer, max_seq_len: int = 64) -> Example:
    """Prepend the start marker and the task prompt; append the end token."""
    raw_input = f"{spec.prompt_prefix} {raw_body}".strip()
    input_ids = [tokenizer.start_id] + tokenizer.encode(raw_input)
    target_ids = tokenizer.encode(raw_target) + [tokenizer.eos_id]
    if len(input_ids) > max_seq_len or len(target_ids) > max_seq_len:
        raise InputError(
            f"formatted example exceeds max_seq_len={max_seq_len} "
            f"(input {len(input_ids)}, target {len(target_ids)})"
        )
    return Example(spec.task_id, input_ids, target_ids, raw_input, raw_target)


def generate_dataset(specs: list[TaskSpec], seed: int, n_per_task: int,
                     tokenizer: Tokenizer | None = None,
                     max_seq_len: int = 64) -> list[Example]:
    """Deterministic, label-balanced samples for every task spec."""
    from .params import rng_for

    if n_per_task < 1:
        raise GenerationError(f"n_per_task must be >= 1, got {n_per_task}")
    tokenizer = tokenizer or Tokenizer()
    examples = []
    for spec in specs:
        rng = rng_for(seed, f"data.task{spec.task_id}.{spec.task_type}")
        for i in range(n_per_task):
            if spec.task_type == "CLS":
                label = spec.labels[i % len(spec.labels)]
                body, target = _gen_cls(rng, spec, label)
            elif spec.task_type == "NLI":
                label = spec.labels[i % len(spec.labels)]
                body, target = _gen_nli(rng, spec, label)
            elif spec.task_type == "GEN":
                body, target = _gen_rev(rng, spec)
            else:
                raise GenerationError(f"unknown task type {spec.task_type!r}")
            examples.append(format_with_prompt(body, target, spec, tokenizer,
                                               max_seq_len))
    return examples


# -- persistence ---------------------------------------------------------------


def write_jsonl(examples: list[Example], path: str, fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(
                {"task_id": ex.task_id, "input": ex.raw_input,
                 "target": ex.raw_target, "fingerprint": fingerprint},
                sort_keys=True))
            fh.write("\n")


def read_jsonl(path: str, specs: list[TaskSpec] | None = None,
               tokenizer: Tokenizer | None = None,
               max_seq_len: int = 64) -> list[Example]:
    """Rebuild full examples (ids re-derived from the raw strings)."""
    specs = specs or default_task_specs()
    tokenizer = tokenizer or Tokenizer()
    by_id = {s.task_id: s for s in specs}
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line_number=lineno) from None
            if not isinstance(rec, dict) or not {"task_id", "input", "target"} <= set(rec):
                raise ParseError("record must contain task_id, input, target",
                                 line_number=lineno)
            spec = by_id.get(rec["task_id"])
            if spec is None:
                raise ParseError(f"unknown task_id {rec['task_id']}", line_number=lineno)
            body = rec["input"]
            prefix = spec.prompt_prefix
            if body.startswith(prefix):
                body = body[len(prefix):].strip()
            examples.append(format_with_prompt(body, rec["target"], spec,
                                               tokenizer, max_seq_len))
    return examples


def write_dataset(out_dir: str, specs: list[TaskSpec], seed: int,
                  n_train_per_task: int, n_eval_per_task: int,
                  tokenizer: Tokenizer | None = None,
                  max_seq_len: int = 64) -> dict:
    """Write train/eval splits plus the sidecar metadata file."""
    tokenizer = tokenizer or Tokenizer()
    os.makedirs(out_dir, exist_ok=True)
    fp = spec_fingerprint(specs, tokenizer.vocab)
    counts = {}
    for split, n in (("train", n_train_per_task), ("eval", n_eval_per_task)):
        split_seed = seed * 2 + (0 if split == "train" else 1)
        examples = generate_dataset(specs, split_seed, n, tokenizer, max_seq_len)
        write_jsonl(examples, os.path.join(out_dir, f"{split}.jsonl"), fp)
        counts[split] = {str(s.task_id): n for s in specs}
    meta = {
        "seed": seed,
        "counts": counts,
        "fingerprint": fp,
        "prompts": {str(s.task_id): s.prompt_prefix for s in specs},
        "task_types": {str(s.task_id): s.task_type for s in specs},
        "seq_len_range": [specs[0].seq_len_min, specs[0].seq_len_max] if specs else [],
        "vocab_size": len(tokenizer),
    }
    with open(os.path.join(out_dir, "dataset.meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return meta
