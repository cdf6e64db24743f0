"""Augmented delayed MDPs, exact beliefs and trajectory augmentation."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import TabularMdp

ENUMERATION_BUDGET = 10**6


@dataclass(frozen=True)
class AugmentedState:
    """Delta-old observation plus the Delta actions taken since (oldest first).

    Masked slots (actions that do not exist yet) are ``None``.
    """

    base_state: object
    action_window: tuple = ()

    @property
    def delay(self) -> int:
        return len(self.action_window)

    @property
    def mask(self) -> tuple:
        return tuple(a is None for a in self.action_window)

    def __eq__(self, other):
        if not isinstance(other, AugmentedState):
            return NotImplemented
        return _equal(self.base_state, other.base_state) and len(self.action_window) == len(
            other.action_window
        ) and all(_equal(a, b) for a, b in zip(self.action_window, other.action_window))

    def __hash__(self):
        return hash((_key(self.base_state), tuple(_key(a) for a in self.action_window)))


def _key(v):
    if v is None:
        return None
    if isinstance(v, np.ndarray):
        return tuple(v.ravel().tolist())
    return v


def _equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return bool(np.array_equal(np.asarray(a), np.asarray(b)))


@dataclass
class AugmentedTuple:
    x: AugmentedState
    a: object
    r: float
    x_next: AugmentedState
    true_state: object
    done: bool = False
    boundary: bool = False
    # s_{t-Delta+1..t}: labels for the belief sequence model
    intermediate_states: tuple = ()
    next_true_state: object = None


# ---------------------------------------------------------------------------
# tabular machinery

def _check_ids(mdp: TabularMdp, x: AugmentedState):
    if not (isinstance(x.base_state, (int, np.integer)) and 0 <= x.base_state < mdp.n_states):
        raise ValueError(f"invalid state id {x.base_state!r}")
    for a in x.action_window:
        if not (isinstance(a, (int, np.integer)) and 0 <= a < mdp.n_actions):
            raise ValueError(f"invalid action id {a!r}")


def exact_belief(mdp: TabularMdp, x: AugmentedState) -> np.ndarray:
    """Distribution of the current state given the augmented state.

    A point mass at the base state pushed through the kernels of the window
    actions in order.
    """
    _check_ids(mdp, x)
    b = np.zeros(mdp.n_states)
    b[x.base_state] = 1.0
    for a in x.action_window:
        b = b @ mdp.transition[:, a, :]
    return b


def exact_belief_matrix_product(mdp: TabularMdp, x: AugmentedState) -> np.ndarray:
    """Same as :func:`exact_belief` via the product of transition matrices."""
    _check_ids(mdp, x)
    M = np.eye(mdp.n_states)
    for a in x.action_window:
        M = M @ mdp.transition[:, a, :]
    return M[x.base_state].copy()


def delayed_reward(mdp: TabularMdp, x: AugmentedState, a: int) -> float:
    if not 0 <= a < mdp.n_actions:
        raise ValueError(f"invalid action id {a!r}")
    return float(exact_belief(mdp, x) @ mdp.reward[:, a])


def delayed_transition(mdp: TabularMdp, x: AugmentedState, a: int) -> dict:
    """Successor augmented states with their probabilities."""
    _check_ids(mdp, x)
    if not 0 <= a < mdp.n_actions:
        raise ValueError(f"invalid action id {a!r}")
    if x.delay == 0:
        row = mdp.transition[x.base_state, a]
        window = ()
    else:
        row = mdp.transition[x.base_state, x.action_window[0]]
        window = tuple(x.action_window[1:]) + (int(a),)
    return {AugmentedState(int(s), window): float(row[s]) for s in np.flatnonzero(row > 0)}


def n_augmented_states(n_states: int, n_actions: int, delay: int) -> int:
    return n_states * n_actions**delay


def augmented_index(x: AugmentedState, n_actions: int) -> int:
    idx = int(x.base_state)
    for a in x.action_window:
        idx = idx * n_actions + int(a)
    return idx


def augmented_state(idx: int, n_states: int, n_actions: int, delay: int) -> AugmentedState:
    window = []
    for _ in range(delay):
        idx, a = divmod(idx, n_actions)
        window.append(a)
    if not 0 <= idx < n_states:
        raise ValueError("index out of range")
    return AugmentedState(int(idx), tuple(reversed(window)))


def enumerate_augmented_states(n_states: int, n_actions: int, delay: int) -> list:
    n = n_augmented_states(n_states, n_actions, delay)
    return [augmented_state(i, n_states, n_actions, delay) for i in range(n)]


def _window_table(n_actions: int, delay: int) -> np.ndarray:
    """All windows in index order, shape (A**delay, delay)."""
    if delay == 0:
        return np.zeros((1, 0), dtype=int)
    grids = np.indices((n_actions,) * delay).reshape(delay, -1).T
    return grids


def belief_matrix(mdp: TabularMdp, delay: int) -> np.ndarray:
    """Beliefs of all augmented states in index order, shape (X, S)."""
    S, A = mdp.n_states, mdp.n_actions
    windows = _window_table(A, delay)
    W = len(windows)
    B = np.zeros((S * W, S))
    for s in range(S):
        B[s * W:(s + 1) * W, s] = 1.0
    for k in range(delay):
        acts = np.tile(windows[:, k], S)
        B = np.einsum("xs,xst->xt", B, mdp.transition[:, acts, :].transpose(1, 0, 2))
    return B


def build_augmented_mdp(mdp: TabularMdp, delay: int, init_action: int = 0) -> TabularMdp:
    """Enumerate the delay-``delay`` augmented MDP as a :class:`TabularMdp`.

    The initial distribution puts rho0 mass on windows filled with
    ``init_action``; the state metric is d_S(base) + sum of d_A over window slots.
    """
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    if delay == 0:
        return mdp
    S, A = mdp.n_states, mdp.n_actions
    X = n_augmented_states(S, A, delay)
    if X > ENUMERATION_BUDGET:
        raise ValueError(f"enumeration budget exceeded: {X} augmented states > {ENUMERATION_BUDGET}")
    windows = _window_table(A, delay)
    W = len(windows)
    base = np.repeat(np.arange(S), W)
    win = np.tile(windows, (S, 1))

    T = np.zeros((X, A, X))
    shifted = np.zeros((X,), dtype=int)
    for k in range(1, delay):
        shifted = shifted * A + win[:, k]
    for a in range(A):
        tail = shifted * A + a  # window index of (a_2..a_Delta, a)
        rows = mdp.transition[base, win[:, 0], :]  # (X, S)
        cols = np.arange(S)[None, :] * W + tail[:, None]
        np.add.at(T[:, a, :], (np.arange(X)[:, None].repeat(S, 1), cols), rows)

    B = belief_matrix(mdp, delay)
    R = B @ mdp.reward

    rho = np.zeros(X)
    init_window = np.full(delay, init_action)
    w_idx = 0
    for a in init_window:
        w_idx = w_idx * A + int(a)
    rho[np.arange(S) * W + w_idx] = mdp.rho0

    d_window = np.zeros((W, W))
    for k in range(delay):
        d_window += mdp.action_metric[windows[:, k][:, None], windows[:, k][None, :]]
    d_aug = (mdp.state_metric[:, None, :, None] + d_window[None, :, None, :]).reshape(X, X)

    return TabularMdp(
        transition=T, reward=R, gamma=mdp.gamma, horizon=mdp.horizon, rho0=rho,
        state_metric=d_aug, action_metric=mdp.action_metric.copy(), metric="custom",
        check_metrics=False,
    )


def sub_belief_matrix(mdp: TabularMdp, delay: int, shorter: int) -> np.ndarray:
    """Distribution over delay-``shorter`` augmented states given each delay-``delay`` one.

    Shape (X_delay, X_shorter). The shorter window is the tail of the longer one
    and its base state is the head of the window pushed through the kernel.
    """
    if not 0 <= shorter <= delay:
        raise ValueError("need 0 <= shorter <= delay")
    S, A = mdp.n_states, mdp.n_actions
    X = n_augmented_states(S, A, delay)
    Xs = n_augmented_states(S, A, shorter)
    out = np.zeros((X, Xs))
    head = delay - shorter
    for i in range(X):
        x = augmented_state(i, S, A, delay)
        b = exact_belief(mdp, AugmentedState(x.base_state, x.action_window[:head]))
        tail = x.action_window[head:]
        for s in np.flatnonzero(b > 0):
            out[i, augmented_index(AugmentedState(int(s), tail), A)] += b[s]
    return out


# ---------------------------------------------------------------------------
# trajectories

def augment_trajectory(traj: Sequence, delay: int, include_boundary: bool = False) -> list:
    """Turn delay-free ``(s, a, r, s')`` transitions into augmented tuples.

    Emits ``T - delay`` learner tuples. With ``include_boundary`` the first
    ``delay`` steps are also emitted as flagged belief-training samples whose
    missing window slots are masked (``None``).
    """
    T = len(traj)
    states = [t[0] for t in traj]
    if T:
        states.append(traj[-1][3])
    actions = [t[1] for t in traj]
    rewards = [float(t[2]) for t in traj]
    out = []
    if include_boundary:
        for t in range(min(delay, T)):
            pad = (None,) * (delay - t)
            x = AugmentedState(states[0], tuple(actions[:t]) + pad)
            x_next = AugmentedState(states[0], tuple(actions[:t + 1]) + (None,) * (delay - t - 1))
            out.append(AugmentedTuple(
                x=x, a=actions[t], r=rewards[t], x_next=x_next, true_state=states[t],
                done=(t == T - 1), boundary=True,
                intermediate_states=tuple(states[1:t + 1]),
                next_true_state=states[t + 1],
            ))
    for i in range(max(T - delay, 0)):
        x = AugmentedState(states[i], tuple(actions[i:i + delay]))
        x_next = AugmentedState(states[i + 1], tuple(actions[i + 1:i + delay + 1]))
        out.append(AugmentedTuple(
            x=x, a=actions[i + delay], r=rewards[i + delay], x_next=x_next,
            true_state=states[i + delay], done=(i + delay == T - 1),
            intermediate_states=tuple(states[i + 1:i + delay + 1]),
            next_true_state=states[i + delay + 1],
        ))
    return out


def recover_trajectory(tuples: Sequence, delay: int) -> list:
    """Inverse of :func:`augment_trajectory` with ``include_boundary=True``."""
    boundary = [t for t in tuples if t.boundary]
    learner = [t for t in tuples if not t.boundary]
    steps = []
    for t in boundary:
        steps.append((t.true_state, t.a, t.r, t.next_true_state))
    for t in learner:
        steps.append((t.true_state, t.a, t.r, t.next_true_state))
    if len(boundary) < delay and learner:
        raise ValueError("boundary samples missing; cannot recover the first steps")
    return steps


@dataclass
class AugmentedArrays:
    """Column-stacked augmented samples for vectorised training.

    ``window`` has shape (N, delay, action_dim) and ``mask`` (N, delay) marks
    slots that hold no real action; ``labels`` holds s_{t-delay+1..t}.
    """

    base: np.ndarray
    window: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_base: np.ndarray
    next_window: np.ndarray
    next_mask: np.ndarray
    true_state: np.ndarray
    next_true_state: np.ndarray
    labels: np.ndarray
    done: np.ndarray
    boundary: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.reward)

    @property
    def delay(self) -> int:
        return self.window.shape[1]

    def take(self, idx) -> "AugmentedArrays":
        return AugmentedArrays(**{k: v[idx] for k, v in self.__dict__.items()})

    def learner_only(self) -> "AugmentedArrays":
        return self.take(~self.boundary)

    @classmethod
    def concat(cls, parts: Sequence["AugmentedArrays"]) -> "AugmentedArrays":
        keys = parts[0].__dict__.keys()
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in keys})


def truncate_windows(batch: AugmentedArrays, rng: np.random.Generator) -> AugmentedArrays:
    """Copy of ``batch`` with each row cut to k ~ U{1..D} real actions (never more than it had)."""
    D = batch.delay
    if D == 0 or len(batch) == 0:
        return batch
    k = rng.integers(1, D + 1, size=len(batch))
    cut = np.arange(D)[None, :] >= k[:, None]
    return AugmentedArrays(**{**batch.__dict__, "mask": batch.mask | cut})


def augment_arrays(states: np.ndarray, actions: np.ndarray, rewards: np.ndarray, delay: int,
                   include_boundary: bool = False, fill_action: float = 0.0) -> AugmentedArrays:
    """Array version of :func:`augment_trajectory` for one trajectory.

    ``states`` has T+1 rows (the final successor included), ``actions`` T rows.
    Masked slots are filled with ``fill_action`` (their content is irrelevant
    to a model that honours the mask).
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if actions.ndim == 1:
        actions = actions[:, None]
    T = len(actions)
    ds, da = states.shape[1], actions.shape[1]
    starts = list(range(-delay, T - delay)) if include_boundary else list(range(0, T - delay))
    starts = [i for i in starts if i + delay >= 0 and i + delay < T]
    n = len(starts)
    out = dict(
        base=np.zeros((n, ds)), window=np.full((n, delay, da), fill_action), mask=np.zeros((n, delay), bool),
        action=np.zeros((n, da)), reward=np.zeros(n), next_base=np.zeros((n, ds)),
        next_window=np.full((n, delay, da), fill_action), next_mask=np.zeros((n, delay), bool),
        true_state=np.zeros((n, ds)), next_true_state=np.zeros((n, ds)), labels=np.zeros((n, delay, ds)),
        done=np.zeros(n, bool), boundary=np.zeros(n, bool),
    )
    for row, i in enumerate(starts):
        t = i + delay  # current time
        j0 = max(i, 0)
        k = t - j0  # number of real actions in the window
        out["base"][row] = states[j0]
        out["window"][row, :k] = actions[j0:t]
        out["mask"][row, k:] = True
        out["action"][row] = actions[t]
        out["reward"][row] = rewards[t]
        out["true_state"][row] = states[t]
        out["next_true_state"][row] = states[t + 1]
        out["labels"][row, :k] = states[j0 + 1:t + 1]
        out["done"][row] = t == T - 1
        out["boundary"][row] = i < 0
        j1 = max(i + 1, 0)
        k1 = t + 1 - j1
        out["next_base"][row] = states[j1]
        out["next_window"][row, :k1] = actions[j1:t + 1]
        out["next_mask"][row, k1:] = True
    return AugmentedArrays(**out)


# ---------------------------------------------------------------------------
# persistence: JSON lines with a header record, or the binary twin

_BIN_MAGIC = b"DTCA"
_BIN_VERSION = 1


def _to_json_value(v):
    if v is None:
        return None
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _from_json_value(v):
    if isinstance(v, list):
        return np.array(v, dtype=float)
    return v


def _state_to_doc(x: AugmentedState):
    return {"base": _to_json_value(x.base_state), "window": [_to_json_value(a) for a in x.action_window]}


def _state_from_doc(doc) -> AugmentedState:
    return AugmentedState(_from_json_value(doc["base"]), tuple(_from_json_value(a) for a in doc["window"]))


def tuple_to_doc(t: AugmentedTuple) -> dict:
    return {
        "x": _state_to_doc(t.x), "a": _to_json_value(t.a), "r": t.r, "x_next": _state_to_doc(t.x_next),
        "true_state": _to_json_value(t.true_state), "done": bool(t.done), "boundary": bool(t.boundary),
        "intermediate_states": [_to_json_value(s) for s in t.intermediate_states],
        "next_true_state": _to_json_value(t.next_true_state),
    }


def tuple_from_doc(doc: dict) -> AugmentedTuple:
    return AugmentedTuple(
        x=_state_from_doc(doc["x"]), a=_from_json_value(doc["a"]), r=float(doc["r"]),
        x_next=_state_from_doc(doc["x_next"]), true_state=_from_json_value(doc["true_state"]),
        done=bool(doc["done"]), boundary=bool(doc.get("boundary", False)),
        intermediate_states=tuple(_from_json_value(s) for s in doc.get("intermediate_states", [])),
        next_true_state=_from_json_value(doc.get("next_true_state")),
    )


def write_tuples_jsonl(path, tuples: Sequence[AugmentedTuple], delay: int) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "header", "delay": delay, "count": len(tuples)}) + "\n")
        for t in tuples:
            fh.write(json.dumps(tuple_to_doc(t)) + "\n")


def _pack_value(buf: io.BytesIO, v):
    """Length-prefixed little-endian float64 array; length 0xFFFFFFFF encodes a masked slot."""
    if v is None:
        buf.write(struct.pack("<I", 0xFFFFFFFF))
        return
    arr = np.atleast_1d(np.asarray(v, dtype="<f8"))
    buf.write(struct.pack("<I", arr.size))
    buf.write(arr.tobytes())


def _unpack_value(fh, is_int: bool):
    (n,) = struct.unpack("<I", fh.read(4))
    if n == 0xFFFFFFFF:
        return None
    arr = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(float)
    if is_int:
        return int(arr[0])
    return arr


def write_tuples_binary(path, tuples: Sequence[AugmentedTuple], delay: int) -> None:
    is_int = bool(tuples) and isinstance(tuples[0].x.base_state, (int, np.integer))
    buf = io.BytesIO()
    buf.write(_BIN_MAGIC)
    buf.write(struct.pack("<IIIB", _BIN_VERSION, delay, len(tuples), int(is_int)))
    for t in tuples:
        for x in (t.x, t.x_next):
            _pack_value(buf, x.base_state)
            buf.write(struct.pack("<I", len(x.action_window)))
            for a in x.action_window:
                _pack_value(buf, a)
        _pack_value(buf, t.a)
        buf.write(struct.pack("<d", t.r))
        _pack_value(buf, t.true_state)
        _pack_value(buf, t.next_true_state)
        buf.write(struct.pack("<BB", int(t.done), int(t.boundary)))
        buf.write(struct.pack("<I", len(t.intermediate_states)))
        for s in t.intermediate_states:
            _pack_value(buf, s)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_binary(fh) -> tuple[int, list]:
    version, delay, count, is_int = struct.unpack("<IIIB", fh.read(13))
    if version != _BIN_VERSION:
        raise ValueError(f"unsupported binary version {version}")
    is_int = bool(is_int)
    out = []
    for _ in range(count):
        xs = []
        for _ in range(2):
            base = _unpack_value(fh, is_int)
            (w,) = struct.unpack("<I", fh.read(4))
            xs.append(AugmentedState(base, tuple(_unpack_value(fh, is_int) for _ in range(w))))
        a = _unpack_value(fh, is_int)
        (r,) = struct.unpack("<d", fh.read(8))
        ts = _unpack_value(fh, is_int)
        nts = _unpack_value(fh, is_int)
        done, boundary = struct.unpack("<BB", fh.read(2))
        (k,) = struct.unpack("<I", fh.read(4))
        inter = tuple(_unpack_value(fh, is_int) for _ in range(k))
        out.append(AugmentedTuple(xs[0], a, r, xs[1], ts, bool(done), bool(boundary), inter, nts))
    return delay, out


def read_tuples(path) -> tuple[int, list]:
    """Load a tuple file in either format; returns ``(delay, tuples)``."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _BIN_MAGIC:
            return _read_binary(fh)
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header" or "delay" not in header:
            raise ValueError("missing delay header record")
        tuples = [tuple_from_doc(json.loads(line)) for line in fh if line.strip()]
    return int(header["delay"]), tuples
