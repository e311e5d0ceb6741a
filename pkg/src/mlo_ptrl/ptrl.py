"""Parallel transfer between per-band multi-agent systems.

Every ``n_steps`` environment steps all systems meet at a barrier where they
(1) swap their best/worst recent experiences, (2) exchange joint Q-values for
their freshly sampled batches and train on the transfer-augmented TD loss,
(3) refresh their target networks and (4) empty their episodic buffers.
Outside the barrier no system touches another's state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import neural
from .vdn import Batch, StepInfo, TrainConfig, Transition, VdnMas, team_reward
from .wlan import NUM_MCS, Scenario, WlanEnv

log = logging.getLogger(__name__)

EXPERIENCE_MODES = ("none", "best", "worst", "both")
ARCHITECTURES = ("per-band", "centralized")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, partial_log=None):
        super().__init__(msg)
        self.partial_log = partial_log


@dataclass
class PtrlConfig:
    sigma: float = 1.0
    experience_mode: str = "both"
    # None -> 20% of the episodic buffer
    n_good: int | None = None
    n_bad: int | None = None
    q_transfer: bool = True
    optimistic: bool = True
    architecture: str = "per-band"
    action_cap: int = 4096

    def __post_init__(self):
        if self.experience_mode not in EXPERIENCE_MODES:
            raise ConfigError(f"experience_mode must be one of {EXPERIENCE_MODES}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")

    def counts(self, ep_size: int) -> tuple[int, int]:
        default = int(round(0.2 * ep_size))
        n_g = default if self.n_good is None else self.n_good
        n_b = default if self.n_bad is None else self.n_bad
        if n_g < 0 or n_b < 0 or n_g + n_b > ep_size:
            raise ConfigError(f"need 0 <= n_good + n_bad <= {ep_size}, got {n_g} + {n_b}")
        return n_g, n_b

    def to_dict(self):
        return asdict(self)


VARIANTS = {
    "oVDN": dict(experience_mode="both", q_transfer=True, optimistic=True),
    "oVDN_g": dict(experience_mode="best", q_transfer=True, optimistic=True),
    "oVDN_b": dict(experience_mode="worst", q_transfer=True, optimistic=True),
    "VDN": dict(experience_mode="both", q_transfer=True, optimistic=False),
    "VDN-nonQ": dict(experience_mode="both", q_transfer=False, optimistic=True),
    "non-PTRL": dict(architecture="centralized", experience_mode="none", q_transfer=False, optimistic=True),
}


# Training schedules. "reference" is one gradient step per boundary with the
# target copied every boundary; "desk" gives a 2000-step run enough updates
# and a target that stays fixed for 40 of them.
PROFILES = {
    "reference": {},
    "desk": dict(total_steps=2000, updates_per_boundary=10, target_sync_boundaries=4),
}


def train_config(profile: str = "reference", **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[profile], **overrides})


def variant_config(name: str, **overrides) -> PtrlConfig:
    try:
        preset = VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
    return PtrlConfig(**{**preset, **overrides})


def foreign_qtot_term(m, qtots: dict, sigma: float):
    """sigma times the mean joint Q-value of every other system, per batch index.

    ``qtots`` maps system id -> per-sample Q_tot vector (or None when that
    system had no batch this round). Returns 0.0 when there is nobody to learn from.
    """
    others = [v for k, v in qtots.items() if k != m and v is not None]
    if sigma == 0 or not others:
        return 0.0
    lengths = {len(v) for v in others}
    if len(lengths) != 1:
        raise ValueError(f"foreign Q_tot vectors are not batch-aligned: lengths {sorted(lengths)}")
    return sigma * (np.sum(others, axis=0) / len(others))


def select_transfer_experiences(items: list[Transition], n_good: int, n_bad: int, mode: str) -> list[Transition]:
    """Highest- and/or lowest-reward transitions from an episodic buffer.

    Ties keep insertion order. In "both" mode the two sets are disjoint, so
    exactly n_good + n_bad transitions come back.
    """
    if mode not in EXPERIENCE_MODES:
        raise ValueError(f"unknown experience mode {mode!r}")
    if mode == "none" or not items:
        return []
    n = len(items)
    want_g = n_good if mode in ("best", "both") else 0
    want_b = n_bad if mode in ("worst", "both") else 0
    if want_g + want_b > n:
        log.warning("requested %d best + %d worst from %d transitions; clamping", want_g, want_b, n)
        want_g = min(want_g, n)
        want_b = n - want_g
    desc = sorted(range(n), key=lambda i: -items[i].reward)
    good = desc[:want_g]
    taken = set(good)
    asc = [i for i in sorted(range(n), key=lambda i: items[i].reward) if i not in taken]
    bad = asc[:want_b]
    return [items[i] for i in good] + [items[i] for i in bad]


def receive_copy(tr: Transition) -> Transition:
    # the sender's GRU state means nothing to the receiver's network
    return replace(tr, hidden=np.zeros_like(tr.hidden))


def broadcast_experiences(sender: str, transitions: list[Transition], systems: dict) -> int:
    """Append the sender's selected transitions to every other system's replay buffer."""
    if not transitions:
        return 0
    src = systems[sender]
    added = 0
    for name, mas in systems.items():
        if name == sender:
            continue
        if mas.n_actions != src.n_actions or mas.n_agents != src.n_agents:
            raise ConfigError(f"cannot transfer {sender} -> {name}: action spaces differ")
        mas.replay.extend(receive_copy(t) for t in transitions)
        added += len(transitions)
    return added


def joint_action_shape(num_channels: dict[str, int], band_ids) -> tuple[int, ...]:
    return tuple(num_channels[b] for b in band_ids)


def decode_joint_action(k: int, shape) -> tuple[int, ...]:
    """0-based flat index -> 1-based channel per band."""
    return tuple(int(i) + 1 for i in np.unravel_index(k, shape))


def encode_joint_action(channels, shape) -> int:
    return int(np.ravel_multi_index(tuple(c - 1 for c in channels), shape))


def build_centralized_mas(scenario: Scenario, cfg: TrainConfig, seed: int = 0,
                          optimistic: bool = True, action_cap: int = 4096) -> VdnMas:
    """One system whose agents each pick a channel tuple covering every band."""
    if not scenario.bands:
        raise ConfigError("no bands configured")
    n_actions = math.prod(b.num_channels for b in scenario.bands)
    if n_actions > action_cap:
        raise ConfigError(f"centralized action space {n_actions} exceeds cap {action_cap}")
    return VdnMas("all", scenario.n_aps, n_actions, cfg, seed=seed, optimistic=optimistic)


@dataclass
class LogRow:
    step: int
    band: str
    reward: float  # mean scaled team reward of this band over the window
    loss: float
    eps: float


@dataclass
class RunLog:
    variant: str
    seed: int
    band_ids: list[str]
    n_aps: int
    rows: list[LogRow] = field(default_factory=list)
    # band -> (T, N) worst-station MCS per AP at every env step
    mcs: dict[str, np.ndarray] = field(default_factory=dict)
    steps_done: int = 0
    error: str | None = None

    HEADER = "step,band,reward,loss,eps"

    def rows_csv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.step},{r.band},{r.reward!r},{r.loss!r},{r.eps!r}")
        return "\n".join(lines) + "\n"

    def mcs_csv(self, band: str) -> str:
        arr = self.mcs[band][: self.steps_done]
        head = "step," + ",".join(f"ap{i}" for i in range(self.n_aps))
        body = [f"{t + 1}," + ",".join(str(int(v)) for v in row) for t, row in enumerate(arr)]
        return "\n".join([head] + body) + "\n"

    def band_rewards(self, band: str) -> np.ndarray:
        return np.array([r.reward for r in self.rows if r.band == band])

    def boundary_rewards(self) -> np.ndarray:
        """Per-boundary reward averaged over bands, the scalar learning curve."""
        return np.mean([self.band_rewards(b) for b in self.band_ids], axis=0)

    def mcs_window(self, band: str, fraction: float = 0.2) -> np.ndarray:
        """Per-AP MCS samples from the final ``fraction`` of steps, (T', N)."""
        arr = self.mcs[band][: self.steps_done]
        start = int(math.floor(len(arr) * (1.0 - fraction)))
        return arr[start:]

    def to_dict(self):
        return {"variant": self.variant, "seed": self.seed, "band_ids": self.band_ids, "n_aps": self.n_aps,
                "rows": [asdict(r) for r in self.rows], "steps_done": self.steps_done,
                "mcs": {b: self.mcs[b][: self.steps_done].tolist() for b in self.band_ids}}


class PtrlTrainer:
    """Runs every system in lockstep against one environment.

    ``env`` is anything with ``reset(seed)``, ``step(assignment)``,
    ``band_ids``, ``n_aps`` and ``num_channels()`` (the built-in WlanEnv or a
    bridge client).
    """

    def __init__(self, env, cfg: TrainConfig, pcfg: PtrlConfig, seed: int, variant: str = "custom"):
        self.env = env
        self.cfg = cfg
        self.pcfg = pcfg
        self.seed = seed
        self.variant = variant
        self.band_ids = list(env.band_ids)
        self.n_aps = env.n_aps
        self.num_channels = env.num_channels()
        self.n_good, self.n_bad = pcfg.counts(cfg.ep_buffer_size)
        self.cross_reads: list[int] = []
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(self.band_ids))]
        if pcfg.architecture == "centralized":
            self.shape = joint_action_shape(self.num_channels, self.band_ids)
            n_actions = math.prod(self.shape)
            if n_actions > pcfg.action_cap:
                raise ConfigError(f"centralized action space {n_actions} exceeds cap {pcfg.action_cap}")
            self.systems = {"all": VdnMas("all", self.n_aps, n_actions, cfg, seed=seeds[0],
                                          optimistic=pcfg.optimistic)}
        else:
            self.systems = {b: VdnMas(b, self.n_aps, self.num_channels[b], cfg, seed=s, optimistic=pcfg.optimistic)
                            for b, s in zip(self.band_ids, seeds)}
        self.experience_enabled = pcfg.experience_mode != "none" and pcfg.architecture == "per-band"
        if self.experience_enabled and len(set(self.num_channels.values())) != 1:
            log.warning("bands have different channel counts %s; experience transfer disabled", self.num_channels)
            self.experience_enabled = False

    @property
    def centralized(self):
        return self.pcfg.architecture == "centralized"

    def _initial(self, first):
        if self.centralized:
            init = np.array([encode_joint_action(ch, self.shape) + 1
                             for ch in zip(*[np.asarray(first[b]) for b in self.band_ids])], dtype=np.int64)
            self.systems["all"].reset_agents(init)
        else:
            for b, mas in self.systems.items():
                mas.reset_agents(first[b])

    def _assignment(self, actions):
        if self.centralized:
            dec = np.array([decode_joint_action(int(a) - 1, self.shape) for a in actions["all"]])
            return {b: [int(v) for v in dec[:, i]] for i, b in enumerate(self.band_ids)}
        return {b: [int(v) for v in actions[b]] for b in self.band_ids}

    def boundary(self, t: int) -> dict[str, StepInfo]:
        """Everything that happens at a synchronisation barrier."""
        self.cross_reads.append(t)
        systems = self.systems
        if self.experience_enabled:
            outgoing = {m: select_transfer_experiences(list(mas.episodic.items), self.n_good, self.n_bad,
                                                       self.pcfg.experience_mode)
                        for m, mas in systems.items()}
            for m, trs in outgoing.items():
                broadcast_experiences(m, trs, systems)
        infos = {m: StepInfo(trained=False) for m in systems}
        for _ in range(self.cfg.updates_per_boundary):
            batches = {m: mas.sample_batch() for m, mas in systems.items()}
            use_q = self.pcfg.q_transfer and self.pcfg.sigma != 0 and len(systems) > 1
            boot, pred = {}, {}
            if use_q:
                for m, mas in systems.items():
                    boot[m], pred[m] = mas.qtot_snapshot(batches[m]) if batches[m] is not None else (None, None)
            for m, mas in systems.items():
                tt = pt = None
                if use_q and batches[m] is not None:
                    tt = foreign_qtot_term(m, boot, self.pcfg.sigma)
                    pt = foreign_qtot_term(m, pred, self.pcfg.sigma)
                    if np.isscalar(tt):
                        tt = pt = None
                info = mas.train_step(batches[m], tt, pt)
                if info.trained:
                    infos[m] = info
        for mas in systems.values():
            mas.end_boundary()
            mas.episodic.clear()
        return infos

    def run(self, total_steps: int | None = None) -> RunLog:
        T = self.cfg.total_steps if total_steps is None else total_steps
        n = self.cfg.n_steps
        rl = RunLog(self.variant, self.seed, self.band_ids, self.n_aps)
        rl.mcs = {b: np.zeros((T, self.n_aps), dtype=np.int8) for b in self.band_ids}
        if T == 0:
            return rl
        t = 0
        try:
            self.env.reset(self.seed)
            self._initial(self.env.initial_assignment())
            window = {b: [] for b in self.band_ids}
            for t in range(1, T + 1):
                actions = {m: mas.act() for m, mas in self.systems.items()}
                res = self.env.step(self._assignment(actions))
                band_r = {}
                for b in self.band_ids:
                    rl.mcs[b][t - 1] = res[b].ap_mcs
                    band_r[b] = team_reward(res[b].ap_mcs)
                    window[b].append(band_r[b])
                if self.centralized:
                    overall = min(int(res[b].team_mcs) for b in self.band_ids)
                    self.systems["all"].observe(actions["all"], team_reward([overall]))
                else:
                    for b, mas in self.systems.items():
                        mas.observe(actions[b], band_r[b])
                rl.steps_done = t
                if t % n == 0:
                    infos = self.boundary(t)
                    for b in self.band_ids:
                        mas = self.systems["all" if self.centralized else b]
                        info = infos["all" if self.centralized else b]
                        rl.rows.append(LogRow(t, b, float(np.mean(window[b])), info.loss, float(mas.eps)))
                        window[b] = []
        except Exception as e:
            rl.error = f"{type(e).__name__}: {e}"
            raise TrainingError(f"training aborted at step {t}: {rl.error}", rl) from e
        return rl

    def save_checkpoints(self, out_dir):
        for m, mas in self.systems.items():
            neural.save_params(f"{out_dir}/online_{m}.npz", mas.params, band=m)
            neural.save_params(f"{out_dir}/target_{m}.npz", mas.target, band=m)


def run_training(scenario: Scenario, variant: str, cfg: TrainConfig | None = None, seed: int = 0,
                 pcfg: PtrlConfig | None = None, env=None, total_steps: int | None = None,
                 return_trainer: bool = False):
    """Train one variant for one seed; returns its RunLog (and the trainer if asked)."""
    cfg = cfg or TrainConfig()
    pcfg = pcfg or variant_config(variant)
    env = env if env is not None else WlanEnv(scenario)
    trainer = PtrlTrainer(env, cfg, pcfg, seed, variant)
    rl = trainer.run(total_steps)
    return (rl, trainer) if return_trainer else rl


def action_space_sizes(num_channels: list[int], n_agents: int) -> dict[str, int]:
    """Per-agent and joint action counts of the per-band and centralized designs."""
    per_band_agent = num_channels
    central_agent = math.prod(num_channels)
    return {
        "per_band_agent": per_band_agent,
        "central_agent": central_agent,
        "per_band_joint": [c ** n_agents for c in num_channels],
        "central_joint": central_agent ** n_agents,
    }


__all__ = [
    "NUM_MCS", "Batch", "PtrlConfig", "VARIANTS", "RunLog", "PtrlTrainer", "run_training",
    "foreign_qtot_term", "select_transfer_experiences", "broadcast_experiences",
    "build_centralized_mas", "decode_joint_action", "encode_joint_action", "action_space_sizes",
]
