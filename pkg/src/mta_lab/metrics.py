"""Evaluation: exact match, LCS-based F1, composite score, weight export."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ExportError
from .data import Example, TaskSpec, Tokenizer, default_task_specs
from .model import Model, greedy_decode
from .tensor import softmax_t

FAMILIES = ("cls", "nli", "gen")


def exact_match_accuracy(preds: list[str], golds: list[str]) -> float:
    if len(preds) != len(golds):
        raise EvaluationError(
            f"prediction/gold length mismatch: {len(preds)} vs {len(golds)}"
        )
    if not golds:
        raise EvaluationError("exact match over an empty list is undefined")
    hits = sum(1 for p, g in zip(preds, golds) if p.strip() == g.strip())
    return 100.0 * hits / len(golds)


def lcs_length(a: list[str], b: list[str]) -> int:
    """Classic dynamic program, O(len(a) * len(b))."""
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        ai = a[i - 1]
        row = dp[i]
        prev = dp[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = max(prev[j], row[j - 1])
    return dp[m][n]


def rouge_l(reference: list[str], hypothesis: list[str]) -> float:
    """LCS F1 (beta = 1) scaled to [0, 100]; zero when either side is empty."""
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref or not hyp:
        return 0.0
    lcs = lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 100.0 * 2 * precision * recall / (precision + recall)


def composite_score(cls_score: float, nli_score: float, gen_score: float) -> float:
    return (cls_score + nli_score + gen_score) / 3


@dataclass
class EvalReport:
    scores: dict = field(default_factory=dict)       # cls/nli/gen/composite
    examples: list = field(default_factory=list)     # per-example records

    def to_dict(self) -> dict:
        return {"scores": dict(self.scores), "examples": list(self.examples)}


def evaluate(model: Model, dataset: list[Example], stage: int,
             specs: list[TaskSpec] | None = None,
             tokenizer: Tokenizer | None = None,
             max_new: int | None = None,
             threads: int = 1) -> EvalReport:
    """Greedy-decode every example and score each task family.

    Classification and inference families score by exact match, the
    generation family by mean LCS F1; the composite is their plain mean.
    """
    specs = specs or default_task_specs()
    tokenizer = tokenizer or Tokenizer()
    family_of = {s.task_id: s.task_type.lower() for s in specs}
    present = {family_of.get(ex.task_id) for ex in dataset}
    missing = [f for f in FAMILIES if f not in present]
    if missing:
        raise EvaluationError(f"task families absent from dataset: {', '.join(missing)}")
    if max_new is None:
        max_new = min(model.config.max_seq_len,
                      max(len(ex.target_ids) for ex in dataset) + 2)

    def predict(ex: Example) -> str:
        out = greedy_decode(model, ex.input_ids, ex.task_id, stage, max_new)
        return tokenizer.decode(out, skip_special=True)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(predict, dataset))
    else:
        preds = [predict(ex) for ex in dataset]

    records = []
    by_family: dict[str, list[float]] = {f: [] for f in FAMILIES}
    for ex, pred in zip(preds and dataset, preds):
        fam = family_of[ex.task_id]
        gold = ex.raw_target.strip()
        if fam == "gen":
            score = rouge_l(gold.split(), pred.split())
        else:
            score = 100.0 if pred.strip() == gold else 0.0
        by_family[fam].append(score)
        records.append({"input": ex.raw_input, "gold": gold,
                        "prediction": pred, "score": score})

    scores = {f: float(np.mean(by_family[f])) for f in FAMILIES}
    scores["composite"] = composite_score(scores["cls"], scores["nli"], scores["gen"])
    return EvalReport(scores=scores, examples=records)


def export_task_weights(model: Model, out_dir: str) -> list[str]:
    """Per mixture layer, write the softened task-weight rows as CSV.

    One file per layer, named task_weights_layer{i}.csv, with a header of
    adapter indices and one row per task type; rows are the temperature
    softmax of the layer's current weight rows, so each sums to 1.
    """
    if not model.mta_layers:
        raise ExportError("model has no adapter-mixture layers to export")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, layer in sorted(model.mta_layers.items()):
        path = os.path.join(out_dir, f"task_weights_layer{i}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"adapter_{j}" for j in range(layer.cfg.n_adapters)])
            for row in layer.task_weights.data:
                soft = softmax_t(row, layer.cfg.temperature)
                writer.writerow([repr(float(x)) for x in soft])
        paths.append(path)
    return paths
