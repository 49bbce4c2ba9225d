"""Compact encoder-decoder transformer with pluggable adapter-mixture layers.

Topology: pre-norm residual blocks, learned absolute position embeddings,
standard LayerNorm, ReLU feed-forward, input/output embedding tied. Selected
encoder layers route their post-attention hidden states through an
MtaLayer instead of the plain FFN.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InputError, ParameterError, RoutingError, StateError
from .mta import MtaConfig, MtaLayer
from .params import ParamStore, add_layer_norm, add_linear, embedding_normal, rng_for
from .tensor import (
    NEG_MASK,
    Tensor,
    cross_entropy,
    embedding,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    scaled_dot_attention,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_seq_len: int = 64
    dropout_rate: float = 0.0
    mta_layer_indices: tuple[int, ...] = (1,)
    mta: MtaConfig = field(default_factory=MtaConfig)
    pad_id: int = 0
    start_token_id: int = 1
    eos_id: int = 2
    dtype: str = "float64"

    def violations(self) -> list[str]:
        v = []
        for name in ("vocab_size", "d_model", "d_ff", "n_heads", "n_enc_layers",
                     "n_dec_layers", "max_seq_len"):
            if getattr(self, name) < 1:
                v.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            v.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            v.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for i in self.mta_layer_indices:
            if not 0 <= i < self.n_enc_layers:
                v.append(f"mta layer index {i} outside [0, {self.n_enc_layers})")
        reserved = (self.pad_id, self.start_token_id, self.eos_id)
        if len(set(reserved)) != 3:
            v.append(f"pad/start/eos ids must be distinct, got {reserved}")
        for rid in reserved:
            if not 0 <= rid < self.vocab_size:
                v.append(f"reserved id {rid} outside vocabulary of size {self.vocab_size}")
        if self.dtype not in ("float64", "float32"):
            v.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.mta_layer_indices:
            v.extend(self.mta.violations())
        return v

    def validate(self) -> None:
        bad = self.violations()
        if bad:
            raise ConfigError(bad)

    def resolved(self) -> "ModelConfig":
        return replace(
            self,
            mta_layer_indices=tuple(sorted(self.mta_layer_indices)),
            mta=self.mta.resolved(self.d_model, self.d_ff),
        )

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class EncodedSequence(NamedTuple):
    hidden: Tensor          # (positions, d_model)
    start_position: int


class Model:
    """Parameter store plus the forward passes that consume it."""

    def __init__(self, config: ModelConfig, seed: int):
        config = config.resolved()
        config.validate()
        self.config = config
        self.seed = int(seed)
        self.stage = 1
        self.params = ParamStore()
        self.mta_layers: dict[int, MtaLayer] = {}
        self.training = False
        self._dropout_rng: np.random.Generator | None = None
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self):
        cfg = self.config
        dt = cfg.np_dtype
        store = self.params
        seed = self.seed

        def emb(name, rows):
            store.add(name, embedding_normal(rng_for(seed, name), rows, cfg.d_model, dt),
                      init_record={"seed": seed, "scheme": "normal(0.02)"})

        emb("embed.tok", cfg.vocab_size)
        emb("embed.pos_enc", cfg.max_seq_len)
        emb("embed.pos_dec", cfg.max_seq_len)

        def attention_block(prefix):
            for part in ("q", "k", "v", "o"):
                add_linear(store, f"{prefix}.{part}", cfg.d_model, cfg.d_model, seed, dt)

        def ffn_block(prefix):
            add_linear(store, f"{prefix}.l1", cfg.d_model, cfg.d_ff, seed, dt)
            add_linear(store, f"{prefix}.l2", cfg.d_ff, cfg.d_model, seed, dt)

        for i in range(cfg.n_enc_layers):
            add_layer_norm(store, f"enc{i}.ln1", cfg.d_model, dt)
            attention_block(f"enc{i}.attn")
            add_layer_norm(store, f"enc{i}.ln2", cfg.d_model, dt)
            if i in cfg.mta_layer_indices:
                self.mta_layers[i] = MtaLayer(cfg.mta, cfg.d_model, i, store, seed)
            else:
                ffn_block(f"enc{i}.ffn")
        add_layer_norm(store, "enc_final_ln", cfg.d_model, dt)

        for i in range(cfg.n_dec_layers):
            add_layer_norm(store, f"dec{i}.ln1", cfg.d_model, dt)
            attention_block(f"dec{i}.self_attn")
            add_layer_norm(store, f"dec{i}.ln2", cfg.d_model, dt)
            attention_block(f"dec{i}.cross_attn")
            add_layer_norm(store, f"dec{i}.ln3", cfg.d_model, dt)
            ffn_block(f"dec{i}.ffn")
        add_layer_norm(store, "dec_final_ln", cfg.d_model, dt)

    @property
    def n_params(self) -> int:
        return self.params.n_params()

    @property
    def n_trainable(self) -> int:
        return self.params.n_params(trainable_only=True)

    def mta_param_names(self) -> list[str]:
        names = []
        for layer in self.mta_layers.values():
            names.extend(layer.param_names())
        return sorted(names)

    def promote_to_stage2(self, seed: int) -> "Model":
        """Inherit all stage-1 weights and add shared adapter + gate per layer."""
        if not self.mta_layers:
            raise StateError("model has no adapter-mixture layers to promote")
        if self.stage != 1:
            raise StateError("model already promoted to stage 2")
        for i, layer in sorted(self.mta_layers.items()):
            layer.promote_to_stage2(seed)
        self.stage = 2
        return self

    # -- shared internals ---------------------------------------------------

    def _ln(self, prefix, x):
        return layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _linear(self, prefix, x):
        return matmul(x, self.params[prefix + ".w"]) + self.params[prefix + ".b"]

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout_rate
        if not self.training or rate == 0.0 or self._dropout_rng is None:
            return x
        keep = (self._dropout_rng.random(x.data.shape) >= rate) / (1.0 - rate)
        return x * Tensor(keep.astype(x.data.dtype))

    def _heads(self, x: Tensor) -> Tensor:
        b, length, _ = x.data.shape
        h = self.config.n_heads
        dh = self.config.d_model // h
        return transpose(reshape(x, (b, length, h, dh)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, length, dh = x.data.shape
        return reshape(transpose(x, (0, 2, 1, 3)), (b, length, h * dh))

    def _attention(self, prefix, q_in, kv_in, key_lengths, causal=False):
        q = self._heads(self._linear(prefix + ".q", q_in))
        k = self._heads(self._linear(prefix + ".k", kv_in))
        v = self._heads(self._linear(prefix + ".v", kv_in))
        lk = kv_in.data.shape[1]
        mask = np.where(np.arange(lk)[None, :] >= np.asarray(key_lengths)[:, None],
                        NEG_MASK, 0.0)[:, None, None, :]
        ctx = scaled_dot_attention(q, k, v, causal=causal, additive_mask=mask)
        return self._linear(prefix + ".o", self._merge_heads(ctx))

    def _ffn(self, prefix, x):
        return self._linear(prefix + ".l2", relu(self._linear(prefix + ".l1", x)))

    def encode_batch(self, ids: np.ndarray, lengths: np.ndarray,
                     task_ids: np.ndarray, stage: int) -> Tensor:
        cfg = self.config
        length = ids.shape[1]
        h = embedding(self.params["embed.tok"], ids) + \
            embedding(self.params["embed.pos_enc"], np.arange(length))
        for i in range(cfg.n_enc_layers):
            pre = self._ln(f"enc{i}.ln1", h)
            a = self._attention(f"enc{i}.attn", pre, pre, lengths)
            h = h + self._dropout(a)
            pre = self._ln(f"enc{i}.ln2", h)
            if i in self.mta_layers:
                f = self.mta_layers[i].forward(pre, task_ids, stage, start_position=0)
            else:
                f = self._ffn(f"enc{i}.ffn", pre)
            h = h + self._dropout(f)
        return self._ln("enc_final_ln", h)

    def decode_batch(self, enc_h: Tensor, enc_lengths: np.ndarray,
                     dec_ids: np.ndarray, dec_lengths: np.ndarray) -> Tensor:
        cfg = self.config
        length = dec_ids.shape[1]
        h = embedding(self.params["embed.tok"], dec_ids) + \
            embedding(self.params["embed.pos_dec"], np.arange(length))
        for i in range(cfg.n_dec_layers):
            pre = self._ln(f"dec{i}.ln1", h)
            a = self._attention(f"dec{i}.self_attn", pre, pre, dec_lengths, causal=True)
            h = h + self._dropout(a)
            c = self._attention(f"dec{i}.cross_attn", self._ln(f"dec{i}.ln2", h),
                                enc_h, enc_lengths)
            h = h + self._dropout(c)
            f = self._ffn(f"dec{i}.ffn", self._ln(f"dec{i}.ln3", h))
            h = h + self._dropout(f)
        h = self._ln("dec_final_ln", h)
        return matmul(h, transpose(self.params["embed.tok"]))

    def _check_encode_inputs(self, input_ids, task_id, stage):
        cfg = self.config
        ids = list(int(t) for t in input_ids)
        if not ids or ids[0] != cfg.start_token_id:
            raise InputError(
                f"input must begin with the start token id {cfg.start_token_id}"
            )
        if len(ids) > cfg.max_seq_len:
            raise InputError(
                f"input length {len(ids)} exceeds max_seq_len {cfg.max_seq_len}"
            )
        if not 0 <= int(task_id) < cfg.mta.num_task_types:
            raise RoutingError(
                f"task id {task_id} outside [0, {cfg.mta.num_task_types})"
            )
        if stage not in (1, 2):
            raise ParameterError(f"stage must be 1 or 2, got {stage}")
        if stage == 2 and self.stage != 2:
            raise StateError("model not promoted; stage-2 forward unavailable")
        return ids


def build_model(config: ModelConfig, seed: int) -> Model:
    return Model(config, seed)


def encode(model: Model, input_ids, task_id: int, stage: int) -> EncodedSequence:
    """Hidden states (len x d_model) for one sequence; start marker is at 0."""
    ids = model._check_encode_inputs(input_ids, task_id, stage)
    arr = np.array([ids], dtype=np.intp)
    h = model.encode_batch(arr, np.array([len(ids)]), np.array([int(task_id)]), stage)
    return EncodedSequence(reshape(h, (len(ids), model.config.d_model)), 0)


def forward_loss(model: Model, batch, stage: int) -> Tensor:
    """Teacher-forced mean token cross-entropy over non-pad target positions.

    Decoder inputs are the targets shifted right behind the pad id (used as
    the begin-of-target marker, T5 style).
    """
    if not batch:
        raise InputError("batch is empty")
    cfg = model.config
    for ex in batch:
        model._check_encode_inputs(ex.input_ids, ex.task_id, stage)
        if len(ex.target_ids) > cfg.max_seq_len:
            raise InputError(
                f"target length {len(ex.target_ids)} exceeds max_seq_len {cfg.max_seq_len}"
            )
        if not ex.target_ids:
            raise InputError("target is empty")
    b = len(batch)
    le = max(len(ex.input_ids) for ex in batch)
    ld = max(len(ex.target_ids) for ex in batch)
    enc_ids = np.full((b, le), cfg.pad_id, dtype=np.intp)
    dec_in = np.full((b, ld), cfg.pad_id, dtype=np.intp)
    dec_tgt = np.full((b, ld), cfg.pad_id, dtype=np.intp)
    enc_lengths = np.zeros(b, dtype=np.intp)
    dec_lengths = np.zeros(b, dtype=np.intp)
    task_ids = np.zeros(b, dtype=np.intp)
    for i, ex in enumerate(batch):
        n, m = len(ex.input_ids), len(ex.target_ids)
        enc_ids[i, :n] = ex.input_ids
        dec_in[i, 1:m] = ex.target_ids[:-1]
        dec_tgt[i, :m] = ex.target_ids
        enc_lengths[i] = n
        dec_lengths[i] = m
        task_ids[i] = ex.task_id
    enc_h = model.encode_batch(enc_ids, enc_lengths, task_ids, stage)
    logits = model.decode_batch(enc_h, enc_lengths, dec_in, dec_lengths)
    return cross_entropy(logits, dec_tgt, cfg.pad_id)


def greedy_decode(model: Model, input_ids, task_id: int, stage: int,
                  max_new: int) -> list[int]:
    """Argmax decoding until the end token or max_new tokens; ties resolve to
    the lower token id. Returns the emitted ids (end token included)."""
    if max_new < 1:
        raise ParameterError(f"max_new must be >= 1, got {max_new}")
    ids = model._check_encode_inputs(input_ids, task_id, stage)
    cfg = model.config
    with no_grad():
        enc_arr = np.array([ids], dtype=np.intp)
        enc_len = np.array([len(ids)])
        enc_h = model.encode_batch(enc_arr, enc_len, np.array([int(task_id)]), stage)
        prefix = [cfg.pad_id]
        out: list[int] = []
        for _ in range(max_new):
            dec_ids = np.array([prefix], dtype=np.intp)
            logits = model.decode_batch(enc_h, enc_len, dec_ids,
                                        np.array([len(prefix)]))
            nxt = int(np.argmax(logits.data[0, -1]))
            out.append(nxt)
            if nxt == cfg.eos_id:
                break
            if len(prefix) >= cfg.max_seq_len:
                break
            prefix.append(nxt)
    return out
