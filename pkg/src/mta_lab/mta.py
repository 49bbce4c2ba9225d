"""Mixture-of-task-adapters layer: the drop-in replacement for an FFN block.

Stage 1 runs N parallel bottleneck adapters whose outputs are blended by a
learnable, bias-initialized task-weight matrix sharpened with a temperature
softmax. Promotion to stage 2 adds a shared adapter and a gate network; the
per-task mixture is then restricted to the top-k adapters of the task's
weight row, and the gate blends the mixture with the shared adapter using
the sequence-summary features at the leading marker position.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ParameterError, RoutingError, StateError
from .params import ParamStore, add_linear, rng_for
from .tensor import (
    Tensor,
    concat,
    embedding,
    index_select,
    matmul,
    relu,
    reshape,
    slice_axis,
    softmax_last,
)


@dataclass(frozen=True)
class MtaConfig:
    n_adapters: int = 3
    num_task_types: int = 3
    lambda_bias: float = 1.0
    temperature: float = 0.3
    top_k: int = 2
    d_adapter: int | None = None      # resolved to d_ff // 4 at build time
    gate_hidden: int | None = None    # resolved to d_model at build time
    designated_map: tuple[int, ...] | None = None  # task index -> adapter index

    def violations(self) -> list[str]:
        v = []
        if self.n_adapters < 1:
            v.append(f"n_adapters must be >= 1, got {self.n_adapters}")
        if self.num_task_types < 1:
            v.append(f"num_task_types must be >= 1, got {self.num_task_types}")
        if self.lambda_bias < 0:
            v.append(f"lambda_bias must be >= 0, got {self.lambda_bias}")
        if not self.temperature > 0:
            v.append(f"temperature must be > 0, got {self.temperature}")
        if self.top_k < 1:
            v.append(f"top_k must be >= 1, got {self.top_k}")
        if self.d_adapter is not None and self.d_adapter < 1:
            v.append(f"d_adapter must be >= 1, got {self.d_adapter}")
        if self.gate_hidden is not None and self.gate_hidden < 1:
            v.append(f"gate_hidden must be >= 1, got {self.gate_hidden}")
        dm = self.effective_designated_map()
        if len(dm) != self.num_task_types:
            v.append(
                f"designated_map must cover all {self.num_task_types} task types, "
                f"got {len(dm)} entries"
            )
        for i, j in enumerate(dm):
            if not 0 <= j < self.n_adapters:
                v.append(f"designated adapter {j} for task {i} is outside [0, {self.n_adapters})")
        return v

    def effective_designated_map(self) -> tuple[int, ...]:
        if self.designated_map is not None:
            return tuple(self.designated_map)
        # identity assignment; callers with num_task_types > n_adapters must
        # pass an explicit map (identity would fail validation anyway)
        return tuple(range(self.num_task_types))

    def resolved(self, d_model: int, d_ff: int) -> "MtaConfig":
        return replace(
            self,
            d_adapter=self.d_adapter if self.d_adapter is not None else max(1, d_ff // 4),
            gate_hidden=self.gate_hidden if self.gate_hidden is not None else d_model,
            designated_map=self.effective_designated_map(),
        )


def init_task_weights(num_task_types: int, n_adapters: int, lambda_bias: float,
                      designated_map) -> np.ndarray:
    """Biased task-weight rows: 1/N everywhere, (1+lambda)/N at the designated slot."""
    designated_map = tuple(designated_map)
    if len(designated_map) != num_task_types:
        raise ConfigError(
            f"designated_map has {len(designated_map)} entries for {num_task_types} task types"
        )
    for i, j in enumerate(designated_map):
        if not 0 <= j < n_adapters:
            raise ConfigError(
                f"designated adapter {j} for task {i} is outside [0, {n_adapters})"
            )
    if lambda_bias < 0:
        raise ParameterError(f"lambda_bias must be >= 0, got {lambda_bias}")
    w = np.full((num_task_types, n_adapters), 1.0 / n_adapters)
    for i, j in enumerate(designated_map):
        w[i, j] = (1.0 + lambda_bias) / n_adapters
    return w


class Adapter:
    """Bottleneck block mirroring an FFN: down-project, ReLU, up-project."""

    def __init__(self, w_down: Tensor, b_down: Tensor, w_up: Tensor, b_up: Tensor):
        self.w_down = w_down
        self.b_down = b_down
        self.w_up = w_up
        self.b_up = b_up

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(matmul(x, self.w_down) + self.b_down)
        return matmul(h, self.w_up) + self.b_up

    def tensors(self):
        return [self.w_down, self.b_down, self.w_up, self.b_up]


def adapter_forward(adapter: Adapter, x: Tensor) -> Tensor:
    return adapter(x)


class MtaLayer:
    """N parallel adapters plus task-weight routing; stage 2 adds shared+gate."""

    def __init__(self, cfg: MtaConfig, d_model: int, layer_index: int,
                 store: ParamStore, seed: int):
        bad = cfg.violations()
        if bad:
            raise ConfigError(bad)
        if cfg.d_adapter is None or cfg.gate_hidden is None:
            raise ConfigError("MtaConfig must be resolved before building a layer")
        self.cfg = cfg
        self.d_model = d_model
        self.layer_index = layer_index
        self.stage = 1
        self.prefix = f"enc{layer_index}.mta."
        self._store = store
        self._seed = seed
        self.warn_records: list[str] = []
        self.last_gate_weights: np.ndarray | None = None
        self.last_task_ids: np.ndarray | None = None

        if cfg.top_k > cfg.n_adapters:
            msg = f"top_k={cfg.top_k} exceeds n_adapters={cfg.n_adapters}; clamping"
            self.warn_records.append(msg)
            warnings.warn(msg)

        self.adapters = [
            Adapter(*self._build_adapter(f"{self.prefix}adapter{j}", seed))
            for j in range(cfg.n_adapters)
        ]
        self.task_weights = store.add(
            self.prefix + "task_w",
            init_task_weights(cfg.num_task_types, cfg.n_adapters, cfg.lambda_bias,
                              cfg.designated_map),
            init_record={"scheme": "task_bias", "lambda": cfg.lambda_bias},
        )
        self.shared: Adapter | None = None
        self.gate: dict[str, Tensor] | None = None

    def _build_adapter(self, prefix, seed, zero_up=False):
        w_down, b_down = add_linear(self._store, prefix + ".down", self.d_model,
                                    self.cfg.d_adapter, seed)
        w_up, b_up = add_linear(self._store, prefix + ".up", self.cfg.d_adapter,
                                self.d_model, seed, zero_weight=zero_up)
        return w_down, b_down, w_up, b_up

    @property
    def k_effective(self) -> int:
        return min(self.cfg.top_k, self.cfg.n_adapters)

    def param_names(self) -> list[str]:
        return [n for n in self._store.names() if n.startswith(self.prefix)]

    # -- stage transitions ------------------------------------------------

    def promote_to_stage2(self, seed: int) -> "MtaLayer":
        """Add the shared adapter and gate network; adapters and W carry over.

        The shared adapter's up-projection starts at zero so its output is
        exactly zero right after promotion; the gate is freshly initialized.
        """
        if self.stage != 1:
            raise StateError(f"layer {self.layer_index} already promoted to stage 2")
        self.shared = Adapter(*self._build_adapter(self.prefix + "shared", seed,
                                                   zero_up=True))
        g1w, g1b = add_linear(self._store, self.prefix + "gate.l1",
                              3 * self.d_model, self.cfg.gate_hidden, seed)
        g2w, g2b = add_linear(self._store, self.prefix + "gate.l2",
                              self.cfg.gate_hidden, 2, seed)
        self.gate = {"w1": g1w, "b1": g1b, "w2": g2w, "b2": g2b}
        self.stage = 2
        return self

    # -- routing -----------------------------------------------------------

    def _check_task(self, task_id: int) -> int:
        task_id = int(task_id)
        if not 0 <= task_id < self.cfg.num_task_types:
            raise RoutingError(
                f"task id {task_id} outside [0, {self.cfg.num_task_types})"
            )
        return task_id

    def select_top_k(self, task_id: int):
        """Indices of the K largest weight-row entries (ties to the lower
        index) and their temperature-softmax weights over the raw entries."""
        if self.stage != 2:
            raise StateError("top-k selection is a stage-2 operation")
        task_id = self._check_task(task_id)
        indices, w = self._selection(task_id)
        return indices, w.data.copy()

    def _selection(self, task_id: int):
        row_data = self.task_weights.data[task_id]
        k = self.k_effective
        indices = np.argsort(-row_data, kind="stable")[:k]
        row = reshape(slice_axis(self.task_weights, 0, task_id, task_id + 1),
                      (self.cfg.n_adapters,))
        selected = index_select(row, 0, indices)
        weights = softmax_last(selected, self.cfg.temperature)
        return [int(i) for i in indices], weights

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, task_ids, stage: int, start_position: int = 0) -> Tensor:
        """Batched forward: x is (batch, positions, d_model).

        stage 1 touches only the stage-1 parameters and is valid on promoted
        layers too; stage 2 requires promotion.
        """
        task_ids = np.asarray(task_ids, dtype=np.intp).reshape(-1)
        if x.data.ndim != 3 or x.data.shape[0] != task_ids.size:
            raise RoutingError(
                f"expected ({task_ids.size}, positions, {self.d_model}) input, got {x.data.shape}"
            )
        for t in task_ids:
            self._check_task(t)
        if stage == 1:
            return self._forward_stage1(x, task_ids)
        if stage == 2:
            if self.stage != 2:
                raise StateError("layer not promoted; stage-2 forward unavailable")
            return self._forward_stage2(x, task_ids, start_position)
        raise ParameterError(f"stage must be 1 or 2, got {stage}")

    def _forward_stage1(self, x: Tensor, task_ids: np.ndarray) -> Tensor:
        b = x.data.shape[0]
        rows = embedding(self.task_weights, task_ids)             # (B, N)
        gates = softmax_last(rows, self.cfg.temperature)          # (B, N)
        y = None
        for j, adapter in enumerate(self.adapters):
            gj = reshape(slice_axis(gates, 1, j, j + 1), (b, 1, 1))
            term = adapter(x) * gj
            y = term if y is None else y + term
        return y

    def _forward_stage2(self, x: Tensor, task_ids: np.ndarray, start_position: int) -> Tensor:
        b, length, _ = x.data.shape
        if not 0 <= start_position < length:
            raise RoutingError(
                f"start position {start_position} outside sequence of length {length}"
            )
        # Group rows by task so only each task's selected adapters are ever
        # evaluated; unselected adapters stay bit-for-bit out of the output
        # and receive no gradient.
        parts = []
        order = []
        for t in sorted(set(int(t) for t in task_ids)):
            rows_t = np.flatnonzero(task_ids == t)
            x_t = index_select(x, 0, rows_t) if rows_t.size != b else x
            indices, weights = self._selection(t)
            mix_t = None
            for pos, j in enumerate(indices):
                wj = reshape(slice_axis(weights, 0, pos, pos + 1), (1, 1, 1))
                term = self.adapters[j](x_t) * wj
                mix_t = term if mix_t is None else mix_t + term
            parts.append(mix_t)
            order.append(rows_t)
        if len(parts) == 1:
            mix = parts[0]
        else:
            order = np.concatenate(order)
            inverse = np.empty_like(order)
            inverse[order] = np.arange(order.size)
            mix = index_select(concat(parts, 0), 0, inverse)

        shared_out = self.shared(x)                               # (B, L, D)
        s0 = reshape(slice_axis(shared_out, 1, start_position, start_position + 1),
                     (b, self.d_model))
        m0 = reshape(slice_axis(mix, 1, start_position, start_position + 1),
                     (b, self.d_model))
        wstar = self.gate_forward(s0, concat([m0, s0], -1))       # (B, 2)
        self.last_gate_weights = wstar.data.copy()
        self.last_task_ids = task_ids.copy()
        w_mix = reshape(slice_axis(wstar, 1, 0, 1), (b, 1, 1))
        w_shared = reshape(slice_axis(wstar, 1, 1, 2), (b, 1, 1))
        return mix * w_mix + shared_out * w_shared

    def gate_forward(self, s_start: Tensor, astar_start: Tensor) -> Tensor:
        """Two-way mixing weights from the start-position features.

        Inputs are the shared-adapter features and the concatenated
        [mixture, shared] features at the start position; accepts single
        vectors or a batch of them.
        """
        if self.stage != 2:
            raise StateError("gate is a stage-2 component")
        single = s_start.data.ndim == 1
        if single:
            s_start = reshape(s_start, (1, s_start.data.shape[0]))
            astar_start = reshape(astar_start, (1, astar_start.data.shape[0]))
        gin = concat([s_start, astar_start], -1)                  # (B, 3*D)
        h = relu(matmul(gin, self.gate["w1"]) + self.gate["b1"])
        logits = matmul(h, self.gate["w2"]) + self.gate["b2"]
        out = softmax_last(logits, 1.0)
        if single:
            out = reshape(out, (2,))
        return out


# -- single-sequence wrappers matching the layer's positions x d_model view --


def mta_forward_stage1(layer: MtaLayer, x: Tensor, task_id: int) -> Tensor:
    """Stage-1 mixture for one sequence: x is (positions, d_model)."""
    b = reshape(x, (1,) + tuple(x.data.shape))
    out = layer.forward(b, np.array([task_id]), stage=1)
    return reshape(out, tuple(x.data.shape))


def mta_forward_stage2(layer: MtaLayer, x: Tensor, task_id: int,
                       start_position: int = 0) -> Tensor:
    """Stage-2 mixture for one sequence: x is (positions, d_model)."""
    b = reshape(x, (1,) + tuple(x.data.shape))
    out = layer.forward(b, np.array([task_id]), stage=2, start_position=start_position)
    return reshape(out, tuple(x.data.shape))


def select_top_k(layer: MtaLayer, task_id: int):
    return layer.select_top_k(task_id)


def gate_forward(layer: MtaLayer, s_start: Tensor, astar_start: Tensor) -> Tensor:
    return layer.gate_forward(s_start, astar_start)


def promote_to_stage2(layer: MtaLayer, seed: int) -> MtaLayer:
    return layer.promote_to_stage2(seed)
