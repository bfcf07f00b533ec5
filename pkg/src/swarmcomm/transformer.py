"""Soft-attention policy networks for the planning tasks.

Every agent runs the same stack of 2-layer tanh MLPs: a message network over
(own state, relative observation), key/query networks whose scaled dot products
produce an attention row over senders (self included), and an output network
applied to (own state, attention-weighted message sum). Two-round variants
aggregate round one into an internal vector that replaces the state in the
round-two message network; round-two keys and queries still read the raw state.

Forward passes run through the autodiff ops, so the same code serves training
(tape attached) and evaluation (plain numpy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

Array = np.ndarray

_SQUASH_EPS = 1e-24
_RENORM_EPS = 1e-30


@dataclass
class TransformerParams:
    task_kind: str
    rounds: int
    state_dim: int
    action_dim: int
    store: ParamStore
    key_dim: int = 16
    msg_dim: int = 16
    hidden_dim: int = 32
    internal_dim: int = 16

    def copy(self) -> "TransformerParams":
        return TransformerParams(
            self.task_kind,
            self.rounds,
            self.state_dim,
            self.action_dim,
            self.store.copy(),
            self.key_dim,
            self.msg_dim,
            self.hidden_dim,
            self.internal_dim,
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TransformerParams":
        doc = json.loads(Path(path).read_text())
        return cls.from_json_dict(doc)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TransformerParams":
        meta = doc["meta"]
        return cls(
            task_kind=meta["task_kind"],
            rounds=meta["rounds"],
            state_dim=meta["state_dim"],
            action_dim=meta["action_dim"],
            store=ParamStore.from_json_dict(doc["params"]),
            key_dim=meta["key_dim"],
            msg_dim=meta["msg_dim"],
            hidden_dim=meta["hidden_dim"],
            internal_dim=meta["internal_dim"],
        )

    def to_json_dict(self) -> dict:
        return {
            "meta": {
                "task_kind": self.task_kind,
                "rounds": self.rounds,
                "state_dim": self.state_dim,
                "action_dim": self.action_dim,
                "key_dim": self.key_dim,
                "msg_dim": self.msg_dim,
                "hidden_dim": self.hidden_dim,
                "internal_dim": self.internal_dim,
            },
            "params": self.store.to_json_dict(),
        }


def _mlp_shapes(params: TransformerParams) -> dict[str, tuple[int, int]]:
    ds, dk, dm, dh, da = (
        params.state_dim,
        params.key_dim,
        params.msg_dim,
        params.hidden_dim,
        params.action_dim,
    )
    shapes = {
        "msg": (ds + 2, dm),
        "key": (ds + 2, dk),
        "query": (ds, dk),
        "out": (ds + dm, da),
    }
    if params.rounds >= 2:
        shapes.update(
            {
                "internal": (ds + dm, params.internal_dim),
                "msg2": (params.internal_dim + 2, dm),
                "key2": (ds + 2, dk),
                "query2": (ds, dk),
            }
        )
    return shapes


def init_transformer(
    task_kind: str,
    state_dim: int,
    action_dim: int,
    rounds: int,
    rng: np.random.Generator,
    key_dim: int = 16,
    msg_dim: int = 16,
    hidden_dim: int = 32,
    internal_dim: int = 16,
) -> TransformerParams:
    params = TransformerParams(
        task_kind=task_kind,
        rounds=rounds,
        state_dim=state_dim,
        action_dim=action_dim,
        store=ParamStore({}),
        key_dim=key_dim,
        msg_dim=msg_dim,
        hidden_dim=hidden_dim,
        internal_dim=internal_dim,
    )
    weights: dict[str, Array] = {}
    for net, (d_in, d_out) in _mlp_shapes(params).items():
        weights[f"{net}.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden_dim))
        weights[f"{net}.b1"] = np.zeros(hidden_dim)
        weights[f"{net}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, d_out))
        weights[f"{net}.b2"] = np.zeros(d_out)
    params.store = ParamStore(weights)
    return params


def init_for_task(cfg, rng: np.random.Generator, **dims) -> TransformerParams:
    """Initialize with the dimensions a TaskConfig implies."""
    return init_transformer(
        cfg.task_kind, cfg.state_dim, cfg.action_dim, cfg.comm_rounds, rng, **dims
    )


def _mlp(weights: dict[str, ad.TensorLike], net: str, x: ad.TensorLike) -> Tensor:
    h = ad.tanh(ad.add(ad.matmul(x, weights[f"{net}.w1"]), weights[f"{net}.b1"]))
    return ad.add(ad.matmul(h, weights[f"{net}.w2"]), weights[f"{net}.b2"])


def _weights_view(params: TransformerParams, tape: Optional[ad.Tape]) -> dict[str, ad.TensorLike]:
    if tape is None:
        return dict(params.store.params)
    return {name: tape.leaf(value, requires_grad=True) for name, value in params.store.params.items()}


# ---------------------------------------------------------------------------
# single-agent operations
# ---------------------------------------------------------------------------


def message(
    params: TransformerParams,
    s_i: Array,
    o_ij: Array,
    round_index: int = 0,
    h_i: Optional[Array] = None,
) -> Array:
    """Message from agent i to j; round 1 reads the state, round 2 the internal vector."""
    if round_index >= params.rounds:
        raise ValueError("round_index out of range")
    weights = dict(params.store.params)
    if round_index == 0:
        x = np.concatenate([np.asarray(s_i, float), np.asarray(o_ij, float)])
        return _mlp(weights, "msg", x.reshape(1, -1)).data[0]
    if h_i is None:
        raise ValueError("round 2 messages need the internal vector")
    x = np.concatenate([np.asarray(h_i, float), np.asarray(o_ij, float)])
    return _mlp(weights, "msg2", x.reshape(1, -1)).data[0]


def soft_attention(query: Array, keys: Array, key_dim: int) -> Array:
    """Row of attention weights: softmax of scaled dot products against each key."""
    logits = np.asarray(keys, float) @ np.asarray(query, float) / np.sqrt(key_dim)
    return ad.softmax(logits.reshape(1, -1)).data[0]


def squash_action(u: ad.TensorLike, v_max: float) -> Tensor:
    """Smoothly rescale to the open v_max ball: u * v_max * tanh(|u|)/|u|."""
    u_t = u if isinstance(u, Tensor) else Tensor(u)
    n2 = ad.tensor_sum(ad.mul(u_t, u_t), axis=-1, keepdims=True)
    norm = ad.sqrt(ad.add(n2, _SQUASH_EPS))
    factor = ad.div(ad.mul(ad.tanh(norm), v_max), norm)
    return ad.mul(u_t, factor)


def act(
    params: TransformerParams,
    s_i: Array,
    messages_in: Array,
    attn_row: Array,
    v_max: Optional[float] = None,
) -> Array:
    """One agent's action from its state and attention-weighted received messages.

    messages_in: (N, msg_dim) rows of m^{j->i}; attn_row: (N,) weights.
    Formation tasks squash into the velocity ball; unlabeled-goals returns the
    softmax weight vector in the agent's own goal ordering.
    """
    msg_sum = np.asarray(attn_row, float) @ np.asarray(messages_in, float)
    x = np.concatenate([np.asarray(s_i, float), msg_sum]).reshape(1, -1)
    u = _mlp(dict(params.store.params), "out", x)
    if params.task_kind == "unlabeled-goals":
        return ad.softmax(u).data[0]
    if v_max is None:
        raise ValueError("formation actions need v_max")
    return squash_action(u, v_max).data[0]


# ---------------------------------------------------------------------------
# batched forward pass
# ---------------------------------------------------------------------------


@dataclass
class RoundState:
    queries: Tensor  # (B, N, dk)
    keys: Tensor  # (B, N, N, dk)
    messages: Tensor  # (B, N, N, dm), [b, i, j] = message i -> j
    soft: Tensor  # (B, N, N) softmax rows
    attention: Tensor  # (B, N, N) rows actually applied (hardened when masked)
    msg_sum: Tensor  # (B, N, dm)
    internal: Optional[Tensor] = None  # (B, N, internal_dim), rounds >= 2 only


@dataclass
class ForwardResult:
    actions: Tensor  # (B, N, action_dim); unlabeled weights are in global goal order
    rounds: list[RoundState]
    pre_squash: Tensor


def _tile_over_senders(x: Tensor, n: int) -> Tensor:
    b = x.shape[0]
    d = x.shape[-1]
    expanded = ad.reshape(x, (b, x.shape[1], 1, d))
    ones = np.ones((1, 1, n, 1))
    return ad.mul(expanded, ones)


def harden_rows(soft: Tensor, mask: Array) -> Tensor:
    """Mask an attention matrix to the selected senders and renormalize rows.

    Rows whose selection is empty come out all-zero (the agent then acts on its
    state plus a zero message sum). Gradients flow through the kept weights and
    the normalizer, never through the discrete mask.
    """
    masked = ad.mul(soft, np.asarray(mask, dtype=np.float64))
    z = ad.tensor_sum(masked, axis=-1, keepdims=True)
    return ad.div(masked, ad.add(z, _RENORM_EPS))


def forward_round(
    params: TransformerParams,
    states: ad.TensorLike,
    obs: ad.TensorLike,
    round_index: int = 0,
    internal: Optional[Tensor] = None,
    selection_mask: Optional[Array] = None,
    attention_override: Optional[Array] = None,
    select_fn=None,
    weights: Optional[dict[str, ad.TensorLike]] = None,
) -> RoundState:
    """One communication round: keys, queries, messages, attention, message sum.

    selection_mask (B, N, N) hardens the soft rows in-graph; attention_override
    replaces them outright (rows must already be valid distributions over the
    selected senders). select_fn(round_index, soft_rows) may compute the mask
    from the soft attention after it exists.
    """
    if round_index >= params.rounds:
        raise ValueError("round_index out of range")
    if weights is None:
        weights = dict(params.store.params)
    states_t = states if isinstance(states, Tensor) else Tensor(states)
    obs_t = obs if isinstance(obs, Tensor) else Tensor(obs)
    b, n = states_t.shape[0], states_t.shape[1]
    suffix = "" if round_index == 0 else "2"

    state_tiled = _tile_over_senders(states_t, n)
    pair_state_in = ad.concat([state_tiled, obs_t], axis=-1)
    flat_pairs = ad.reshape(pair_state_in, (b * n * n, params.state_dim + 2))
    keys = ad.reshape(_mlp(weights, f"key{suffix}", flat_pairs), (b, n, n, params.key_dim))

    if round_index == 0:
        msg_src = flat_pairs
        msg_net = "msg"
    else:
        if internal is None:
            raise ValueError("round 2 needs the internal vectors from round 1")
        h_tiled = _tile_over_senders(internal, n)
        pair_h_in = ad.concat([h_tiled, obs_t], axis=-1)
        msg_src = ad.reshape(pair_h_in, (b * n * n, params.internal_dim + 2))
        msg_net = "msg2"
    messages = ad.reshape(_mlp(weights, msg_net, msg_src), (b, n, n, params.msg_dim))

    queries = ad.reshape(
        _mlp(weights, f"query{suffix}", ad.reshape(states_t, (b * n, params.state_dim))),
        (b, n, params.key_dim),
    )
    q_exp = ad.reshape(queries, (b, n, 1, params.key_dim))
    logits = ad.div(ad.tensor_sum(ad.mul(q_exp, keys), axis=-1), float(np.sqrt(params.key_dim)))
    soft = ad.softmax(logits)

    if attention_override is not None:
        data = attention_override.data if isinstance(attention_override, Tensor) else np.asarray(attention_override, float)
        attention = soft.tape.constant(data) if soft.tape is not None else Tensor(data)
    else:
        mask = selection_mask
        if mask is None and select_fn is not None:
            mask = select_fn(round_index, soft.data)
        attention = harden_rows(soft, mask) if mask is not None else soft

    received = ad.transpose(messages, (0, 2, 1, 3))
    weighted = ad.mul(ad.reshape(attention, (b, n, n, 1)), received)
    msg_sum = ad.tensor_sum(weighted, axis=2)

    internal_out: Optional[Tensor] = None
    if params.rounds >= 2 and round_index == 0:
        agg = ad.concat([states_t, msg_sum], axis=-1)
        internal_out = ad.reshape(
            _mlp(weights, "internal", ad.reshape(agg, (b * n, params.state_dim + params.msg_dim))),
            (b, n, params.internal_dim),
        )
    return RoundState(queries, keys, messages, soft, attention, msg_sum, internal_out)


def forward_policy(
    params: TransformerParams,
    states: ad.TensorLike,
    obs: ad.TensorLike,
    v_max: Optional[float] = None,
    select_fn=None,
    attention_overrides: Optional[Sequence[Optional[Array]]] = None,
    goal_perm_inv: Optional[Array] = None,
    weights: Optional[dict[str, ad.TensorLike]] = None,
) -> ForwardResult:
    """Full multi-round forward pass for all agents in a batch of worlds.

    select_fn(round_index, soft_rows) may return a (B, N, N) 0/1 mask of
    senders to keep; it sees the soft attention as plain numpy so policies can
    make discrete choices without entering the graph.
    """
    states_t = states if isinstance(states, Tensor) else Tensor(states)
    obs_t = obs if isinstance(obs, Tensor) else Tensor(obs)
    if weights is None:
        weights = dict(params.store.params)
    b, n = states_t.shape[0], states_t.shape[1]

    rounds: list[RoundState] = []
    internal: Optional[Tensor] = None
    for r in range(params.rounds):
        override = attention_overrides[r] if attention_overrides is not None else None
        rs = forward_round(
            params,
            states_t,
            obs_t,
            r,
            internal,
            attention_override=override,
            select_fn=select_fn if override is None else None,
            weights=weights,
        )
        rounds.append(rs)
        internal = rs.internal

    out_in = ad.concat([states_t, rounds[-1].msg_sum], axis=-1)
    u = ad.reshape(
        _mlp(weights, "out", ad.reshape(out_in, (b * n, params.state_dim + params.msg_dim))),
        (b, n, params.action_dim),
    )
    if params.task_kind == "unlabeled-goals":
        local = ad.softmax(u)
        if goal_perm_inv is None:
            raise ValueError("unlabeled-goals forward needs goal_perm_inv")
        actions = ad.take_along_last(local, np.asarray(goal_perm_inv, dtype=np.int64))
    else:
        if v_max is None:
            raise ValueError("formation forward needs v_max")
        actions = squash_action(u, v_max)
    return ForwardResult(actions, rounds, u)
