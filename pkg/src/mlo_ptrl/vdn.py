"""One cooperative multi-agent system trained with (optimistically weighted) VDN.

Agents share a single recurrent Q-network; the AP id is part of each agent's
observation, so the network can still specialise per agent. The online
network picks actions and is optimised; the target network is a periodic copy
that supplies bootstrap values.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neural

log = logging.getLogger(__name__)

MAX_MCS = 13


@dataclass
class TrainConfig:
    gamma: float = 0.99
    alpha: float = 0.1
    eps_start: float = 1.0
    eps_min: float = 0.05
    eps_decay_steps: int = 500
    n_steps: int = 50
    total_steps: int = 15000
    buffer_size: int = 2000
    batch_size: int = 64
    ep_buffer_size: int = 50
    lr: float = 8e-4
    hidden_dim: int = 64
    mlp_hidden_dim: int = 64
    updates_per_boundary: int = 1
    # target <- online once per this many training boundaries
    target_sync_boundaries: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= self.eps_min <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_min <= eps_start <= 1")
        for k in ("eps_decay_steps", "n_steps", "buffer_size", "batch_size", "ep_buffer_size",
                  "hidden_dim", "mlp_hidden_dim", "updates_per_boundary", "target_sync_boundaries"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def to_dict(self):
        return asdict(self)

    @property
    def eps_delta(self) -> float:
        return (self.eps_start - self.eps_min) / self.eps_decay_steps


@dataclass(frozen=True)
class AgentObservation:
    last_action: int  # channel index, 1-based
    prev_action: int
    ap_id: int


def encode_observation(obs: AgentObservation, n_actions: int, n_agents: int) -> np.ndarray:
    """one-hot(last) + one-hot(prev) + one-hot(ap_id), length 2 * n_actions + n_agents."""
    if not (1 <= obs.last_action <= n_actions and 1 <= obs.prev_action <= n_actions):
        raise ValueError(f"action indices must lie in [1, {n_actions}]: {obs}")
    if not 0 <= obs.ap_id < n_agents:
        raise ValueError(f"ap_id must lie in [0, {n_agents}): {obs}")
    v = np.zeros(2 * n_actions + n_agents)
    v[obs.last_action - 1] = 1.0
    v[n_actions + obs.prev_action - 1] = 1.0
    v[2 * n_actions + obs.ap_id] = 1.0
    return v


def encode_joint(last, prev, n_actions) -> np.ndarray:
    """Vectorised encoding for arrays of shape (..., N); returns (..., N, 2A + N)."""
    last = np.asarray(last)
    prev = np.asarray(prev)
    n_agents = last.shape[-1]
    eye_a = np.eye(n_actions)
    ids = np.broadcast_to(np.eye(n_agents), last.shape + (n_agents,))
    return np.concatenate([eye_a[last - 1], eye_a[prev - 1], ids], axis=-1)


def greedy(q_values) -> int:
    """Index of the largest Q-value; lowest index wins ties."""
    return int(np.argmax(q_values))


def select_action(q_values, eps: float, rng: np.random.Generator) -> int:
    """epsilon-greedy over channels; returns a 1-based channel index."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    q_values = np.asarray(q_values)
    # always consume one uniform so RNG streams stay aligned across eps values
    if rng.random() < eps:
        return int(rng.integers(len(q_values))) + 1
    return greedy(q_values) + 1


def decay_epsilon(eps: float, cfg: TrainConfig) -> float:
    nxt = eps - cfg.eps_delta
    return nxt if nxt > cfg.eps_min else cfg.eps_min


def team_reward(per_ap_mcs) -> float:
    mcs = np.asarray(per_ap_mcs)
    if mcs.size == 0 or mcs.min() < 0 or mcs.max() > MAX_MCS:
        raise ValueError(f"MCS values must lie in [0, {MAX_MCS}]: {per_ap_mcs}")
    return 2.0 * float(mcs.min()) / MAX_MCS - 1.0


def mix_qtot(per_agent_q):
    """VDN mixing: the joint value is the plain sum over agents (last axis)."""
    return np.sum(per_agent_q, axis=-1)


def optimistic_weight(qtot_pred, y, alpha):
    """1 where the prediction underestimates the target (strictly), alpha elsewhere."""
    return np.where(np.asarray(qtot_pred) < np.asarray(y), 1.0, alpha)


def weighted_td_loss(qtot_pred, y, weights, transfer_term=None) -> float:
    pred = np.asarray(qtot_pred, dtype=float)
    if transfer_term is not None:
        pred = pred + transfer_term
    return float(np.sum(weights * (pred - y) ** 2))


@dataclass
class Transition:
    last: np.ndarray  # (N,) channel at t-1, 1-based
    prev: np.ndarray  # (N,) channel at t-2
    action: np.ndarray  # (N,) channel chosen at t
    reward: float
    next_last: np.ndarray
    next_prev: np.ndarray
    hidden: np.ndarray  # (N, H) GRU input state at t

    def __post_init__(self):
        if not -1.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [-1, 1]")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._head = 0

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        n = len(self._items)
        start = self._head if n == self.capacity else 0
        for i in range(n):
            yield self._items[(start + i) % n]

    def add(self, tr: Transition):
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._head] = tr
            self._head = (self._head + 1) % self.capacity

    def extend(self, trs):
        for tr in trs:
            self.add(tr)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


class EpisodicBuffer:
    """Transitions collected since the last training boundary."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[Transition] = []

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition):
        self.items.append(tr)
        if len(self.items) > self.capacity:
            self.items.pop(0)

    def clear(self):
        self.items.clear()


@dataclass
class Batch:
    x: np.ndarray  # (B, N, D) encoded observations at t
    action: np.ndarray  # (B, N) 0-based action index
    reward: np.ndarray  # (B,)
    next_x: np.ndarray  # (B, N, D)
    hidden: np.ndarray  # (B, N, H)

    def __len__(self):
        return len(self.reward)

    @classmethod
    def from_transitions(cls, trs: list[Transition], n_actions: int) -> "Batch":
        if not trs:
            raise ValueError("empty batch")
        st = lambda name: np.stack([getattr(t, name) for t in trs])  # noqa: E731
        return cls(
            x=encode_joint(st("last"), st("prev"), n_actions),
            action=st("action") - 1,
            reward=np.array([t.reward for t in trs], dtype=float),
            next_x=encode_joint(st("next_last"), st("next_prev"), n_actions),
            hidden=st("hidden"),
        )


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def predict_qtot(batch: Batch, params, record=False):
    """Online Q_tot at the taken joint action; also the per-agent GRU outputs."""
    B, N = batch.action.shape
    out = neural.q_forward(_flat(batch.x), _flat(batch.hidden), params, record=record)
    q, h1 = out[0], out[1]
    chosen = q[np.arange(B * N), batch.action.ravel()].reshape(B, N)
    qtot = mix_qtot(chosen)
    if record:
        return qtot, h1, out[2]
    return qtot, h1


def next_qtot(batch: Batch, online_params, target_params, online_h1=None):
    """Double-estimation bootstrap: argmax from the online net, value from the target net.

    The hidden state at t+1 comes from unrolling each network one step from the
    stored hidden at t.
    """
    B, N = batch.action.shape
    x, h = _flat(batch.x), _flat(batch.hidden)
    if online_h1 is None:
        online_h1 = neural.gru_forward(x, h, online_params)
    q_on, _ = neural.q_forward(_flat(batch.next_x), online_h1, online_params)
    target_h1 = neural.gru_forward(x, h, target_params)
    q_tg, _ = neural.q_forward(_flat(batch.next_x), target_h1, target_params)
    best = q_on.argmax(axis=1)
    chosen = q_tg[np.arange(B * N), best].reshape(B, N)
    return mix_qtot(chosen)


def td_target(batch: Batch, target_params, online_params, gamma, transfer_term=None, online_h1=None):
    """y = r + gamma * (Q_tot(s') + transfer_term)."""
    boot = next_qtot(batch, online_params, target_params, online_h1)
    if transfer_term is not None:
        if np.shape(transfer_term) != boot.shape:
            raise ValueError(f"transfer term shape {np.shape(transfer_term)} != batch {boot.shape}")
        boot = boot + transfer_term
    return batch.reward + gamma * boot


def loss_and_grads(batch: Batch, params, y, weights, pred_transfer=None):
    """Weighted squared TD error and its gradient w.r.t. the online params."""
    B, N = batch.action.shape
    qtot, _, rec = predict_qtot(batch, params, record=True)
    pred = qtot if pred_transfer is None else qtot + pred_transfer
    err = pred - y
    loss = float(np.sum(weights * err ** 2))
    dq = np.zeros((B * N, params["b2"].shape[0]))
    dpred = 2.0 * weights * err
    dq[np.arange(B * N), batch.action.ravel()] = np.repeat(dpred, N)
    grads, _, _ = neural.backward(rec, dq)
    return loss, grads


@dataclass
class StepInfo:
    trained: bool
    loss: float = float("nan")
    qtot_mean: float = float("nan")
    n_weight_one: int = 0


@dataclass
class VdnMas:
    """One band's multi-agent system: shared recurrent Q-net, buffers, epsilon."""

    name: str
    n_agents: int
    n_actions: int
    cfg: TrainConfig
    seed: int = 0
    optimistic: bool = True
    params: dict = field(init=False)
    target: dict = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.input_dim = 2 * self.n_actions + self.n_agents
        self.params = neural.init_params(self.input_dim, self.n_actions, self.cfg.hidden_dim,
                                         self.cfg.mlp_hidden_dim, rng=self.rng)
        self.target = neural.copy_params(self.params)
        self.opt = neural.Adam(lr=self.cfg.lr)
        self.replay = ReplayBuffer(self.cfg.buffer_size)
        self.episodic = EpisodicBuffer(self.cfg.ep_buffer_size)
        self.eps = self.cfg.eps_start
        self.boundaries = 0
        self.reset_agents(np.ones(self.n_agents, dtype=np.int64))

    def reset_agents(self, initial_channels):
        ch = np.asarray(initial_channels, dtype=np.int64)
        self.last = ch.copy()
        self.prev = ch.copy()
        self.hidden = np.zeros((self.n_agents, self.cfg.hidden_dim))

    def observations(self) -> list[AgentObservation]:
        return [AgentObservation(int(a), int(p), i) for i, (a, p) in enumerate(zip(self.last, self.prev))]

    def act(self) -> np.ndarray:
        """Decay epsilon, then pick one channel per agent from the online network."""
        self.eps = decay_epsilon(self.eps, self.cfg)
        x = encode_joint(self.last, self.prev, self.n_actions)
        q, h_new = neural.q_forward(x, self.hidden, self.params)
        actions = np.array([select_action(q[i], self.eps, self.rng) for i in range(self.n_agents)],
                           dtype=np.int64)
        self._pending = (self.hidden, h_new)
        return actions

    def observe(self, actions, reward: float) -> Transition:
        """Store the step in both buffers and roll the observation window forward."""
        h_t, h_new = self._pending
        actions = np.asarray(actions, dtype=np.int64)
        tr = Transition(self.last.copy(), self.prev.copy(), actions.copy(), float(reward),
                        actions.copy(), self.last.copy(), h_t.copy())
        self.replay.add(tr)
        self.episodic.add(tr)
        self.prev, self.last, self.hidden = self.last, actions.copy(), h_new
        return tr

    def can_train(self) -> bool:
        return len(self.replay) >= self.cfg.batch_size

    def sample_batch(self) -> Batch | None:
        if not self.can_train():
            return None
        return Batch.from_transitions(self.replay.sample(self.cfg.batch_size, self.rng), self.n_actions)

    def qtot_snapshot(self, batch: Batch):
        """(bootstrap Q_tot at s', online Q_tot at the taken action) for sharing with other systems."""
        pred, h1 = predict_qtot(batch, self.params)
        boot = next_qtot(batch, self.params, self.target, h1)
        return boot, pred

    def train_step(self, batch: Batch | None, target_transfer=None, pred_transfer=None) -> StepInfo:
        """One optimiser step on the weighted TD loss; no-op without a batch."""
        if batch is None:
            return StepInfo(trained=False)
        qtot, h1 = predict_qtot(batch, self.params)
        y = td_target(batch, self.target, self.params, self.cfg.gamma, target_transfer, online_h1=h1)
        pred = qtot if pred_transfer is None else qtot + pred_transfer
        if self.optimistic:
            w = optimistic_weight(pred, y, self.cfg.alpha)
        else:
            w = np.ones_like(y)
        loss, grads = loss_and_grads(batch, self.params, y, w, pred_transfer)
        self.params = neural.opt_step(self.params, grads, self.opt)
        return StepInfo(True, loss, float(qtot.mean()), int(np.sum(w == 1.0)))

    def sync_target(self):
        self.target = neural.copy_params(self.params)

    def end_boundary(self):
        self.boundaries += 1
        if self.boundaries % self.cfg.target_sync_boundaries == 0:
            self.sync_target()
