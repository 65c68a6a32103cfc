"""Double DQN in plain numpy.

Everything draws from a single ``numpy.random.Generator`` (PCG64) seeded
from the config, in this order: network initialisation, then per env step
the epsilon-greedy draws, then per gradient step the minibatch indices.
Identical seeds give identical actions, buffer contents and weights.

Training follows the rollout-then-update pattern: an episode is played
with the current network, then as many gradient steps are taken as the
episode had environment steps (once ``learning_starts`` steps have been
collected).  The target network is hard-copied every
``target_update_interval`` gradient steps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .env import POPULATION_EXCEEDED, DosingEnv, EnvConfig, episode_cost

CHECKPOINT_SCHEMA = "fracdose.dqn-checkpoint/1"
LAYER_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")


class TrainingError(RuntimeError):
    pass


# -- network ----------------------------------------------------------------

class QNetwork:
    """MLP ``obs -> hidden -> hidden -> Q`` with ReLU hidden activations.

    Weights are stored input-major (``W`` has shape ``(fan_in, fan_out)``) in
    the order ``W1, b1, W2, b2, W3, b3``.
    """

    def __init__(self, n_inputs: int, n_actions: int = 2, hidden: int = 64, rng=None):
        self.n_inputs, self.n_actions, self.hidden = n_inputs, n_actions, hidden
        shapes = self.shapes()
        if rng is None:
            self.params = {k: np.zeros(s) for k, s in shapes.items()}
            return
        # same ranges as torch.nn.Linear's default init
        self.params = {}
        for layer, fan_in in (("1", n_inputs), ("2", hidden), ("3", hidden)):
            bound = 1.0 / math.sqrt(fan_in)
            self.params["W" + layer] = rng.uniform(-bound, bound, shapes["W" + layer])
            self.params["b" + layer] = rng.uniform(-bound, bound, shapes["b" + layer])

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k, h, a = self.n_inputs, self.hidden, self.n_actions
        return {"W1": (k, h), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (h, a), "b3": (a,)}

    def copy(self) -> "QNetwork":
        net = QNetwork(self.n_inputs, self.n_actions, self.hidden)
        net.params = {k: v.copy() for k, v in self.params.items()}
        return net

    def load_from(self, other: "QNetwork") -> None:
        for k in LAYER_ORDER:
            self.params[k][...] = other.params[k]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in LAYER_ORDER])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in LAYER_ORDER:
            p = self.params[k]
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size

    def forward(self, obs: np.ndarray, cache: bool = False):
        p = self.params
        x = np.atleast_2d(obs)
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"expected observations of length {self.n_inputs}, got {x.shape[1]}")
        z1 = x @ p["W1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["W2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        q = h2 @ p["W3"] + p["b3"]
        if cache:
            return q, (x, h1, h2)
        return q

    def backward(self, dq: np.ndarray, cache) -> dict[str, np.ndarray]:
        x, h1, h2 = cache
        p = self.params
        grads = {"W3": h2.T @ dq, "b3": dq.sum(axis=0)}
        dh2 = (dq @ p["W3"].T) * (h2 > 0)
        grads["W2"] = h1.T @ dh2
        grads["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ p["W2"].T) * (h1 > 0)
        grads["W1"] = x.T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        return grads


def q_forward(net: QNetwork, obs: np.ndarray) -> np.ndarray:
    """Action values for a single observation."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1:
        raise ValueError("q_forward takes one observation; use QNetwork.forward for batches")
    return net.forward(obs)[0]


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- replay -----------------------------------------------------------------

@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity, self.obs_dim = int(capacity), int(obs_dim)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward, next_obs, done) -> None:
        if len(obs) != self.obs_dim or len(next_obs) != self.obs_dim:
            raise ValueError("observation length mismatch")
        i = self.pos
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if batch > self.size:
            raise ValueError(f"cannot draw {batch} distinct transitions from {self.size}")
        return rng.choice(self.size, size=batch, replace=False)

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "obs": self.obs[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_obs": self.next_obs[idx],
            "dones": self.dones[idx],
        }

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return self.batch(self.sample_indices(batch, rng))

    def get(self, i: int) -> Transition:
        return Transition(self.obs[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                          self.next_obs[i].copy(), bool(self.dones[i]))


# -- config -----------------------------------------------------------------

@dataclass(frozen=True)
class DQNConfig:
    batch_size: int = 32
    learning_rate: float = 3.6e-4
    gamma: float = 0.999
    target_update_interval: int = 1000
    learning_starts: int = 10_000
    total_steps: int = 300_000
    buffer_size: int = 100_000
    epsilon_floor: float = 0.05
    epsilon_start: float = 1.0
    epsilon_decay: float | None = None  # steps; None -> total_steps / 10
    gradient_steps: int = 1  # per environment step
    polyak: float = 1.0  # 1.0 = hard copy at each target update
    hidden: int = 64
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        positive = ("batch_size", "learning_rate", "target_update_interval", "total_steps",
                    "buffer_size", "epsilon_start", "gradient_steps", "hidden", "adam_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_starts < 0:
            raise ValueError("learning_starts must be nonnegative")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if not (0.0 <= self.epsilon_floor <= self.epsilon_start <= 1.0):
            raise ValueError("need 0 <= epsilon_floor <= epsilon_start <= 1")
        if not (0.0 < self.polyak <= 1.0):
            raise ValueError("polyak must lie in (0, 1]")
        if self.epsilon_decay is not None and not self.epsilon_decay > 0:
            raise ValueError("epsilon_decay must be positive")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @property
    def decay_steps(self) -> float:
        return self.epsilon_decay if self.epsilon_decay is not None else self.total_steps / 10.0

    @property
    def effective_horizon(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def replace(self, **changes) -> "DQNConfig":
        return DQNConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DQNConfig":
        names = {f.name for f in fields(cls)}
        unknown = [k for k in data if k not in names and not k.startswith("_")]
        if unknown:
            raise ValueError(f"dqn config has unknown fields: {unknown}")
        return cls(**{k: v for k, v in data.items() if k in names})


def epsilon_at(step: int, cfg: DQNConfig) -> float:
    return max(cfg.epsilon_floor, cfg.epsilon_start * math.exp(-step / cfg.decay_steps))


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, so ties go to action 0
    return int(np.argmax(q))


def act(net: QNetwork, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action.  Exactly one uniform draw per call, plus one
    integer draw when exploring."""
    if rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return greedy(q_forward(net, obs))


def double_q_targets(batch: dict, online: QNetwork, target: QNetwork, gamma: float) -> np.ndarray:
    """``r + gamma (1 - done) Q_target(s', argmax_a Q_online(s', a))``."""
    nxt = batch["next_obs"]
    best = np.argmax(online.forward(nxt), axis=1)
    q_next = target.forward(nxt)[np.arange(len(best)), best]
    return batch["rewards"] + gamma * (1.0 - batch["dones"]) * q_next


def bellman_loss(net: QNetwork, batch: dict, targets: np.ndarray):
    """Mean squared Bellman residual and its gradient w.r.t. the weights."""
    q, cache = net.forward(batch["obs"], cache=True)
    rows = np.arange(len(targets))
    resid = q[rows, batch["actions"]] - targets
    loss = float(np.mean(resid**2))
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}; max |target| {np.max(np.abs(targets))}")
    dq = np.zeros_like(q)
    dq[rows, batch["actions"]] = 2.0 * resid / len(targets)
    return loss, net.backward(dq, cache)


def gradient_step(net: QNetwork, batch: dict, targets: np.ndarray, opt: Adam) -> float:
    try:
        loss, grads = bellman_loss(net, batch, np.asarray(targets, dtype=float))
    except TrainingError as exc:
        raise TrainingError(f"{exc} at optimizer step {opt.t + 1}") from None
    opt.update(net.params, grads)
    return loss


# -- training -----------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    end_step: int
    length: int
    ret: float
    cost: float
    reason: str
    epsilon: float
    gradient_steps: int
    loss_mean: float
    loss_max: float


@dataclass
class TrainingLog:
    episodes: list[EpisodeRecord] = field(default_factory=list)
    checkpoints: list[tuple[int, str]] = field(default_factory=list)

    COLUMNS = ("episode", "end_step", "length", "ret", "cost", "reason", "epsilon",
               "gradient_steps", "loss_mean", "loss_max")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.episodes:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.episodes.append(EpisodeRecord(
                    int(row["episode"]), int(row["end_step"]), int(row["length"]),
                    float(row["ret"]), float(row["cost"]), row["reason"], float(row["epsilon"]),
                    int(row["gradient_steps"]), float(row["loss_mean"]), float(row["loss_max"]),
                ))
        return log


class DQNTrainer:
    """Holds the whole training state so that it can be checkpointed and resumed."""

    def __init__(self, env_cfg: EnvConfig, cfg: DQNConfig):
        self.env_cfg, self.cfg = env_cfg, cfg
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        k = env_cfg.frames
        self.online = QNetwork(k, 2, cfg.hidden, rng=self.rng)
        self.target = self.online.copy()
        self.opt = Adam(self.online.params, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
        self.buffer = ReplayBuffer(cfg.buffer_size, k)
        self.env = DosingEnv(env_cfg)
        self.log = TrainingLog()
        self.steps = 0
        self.grad_steps = 0

    @property
    def finished(self) -> bool:
        return self.steps >= self.cfg.total_steps

    def run_episode(self) -> EpisodeRecord:
        cfg, env, rng = self.cfg, self.env, self.rng
        obs = env.reset()
        ret, length, eps = 0.0, 0, epsilon_at(self.steps, cfg)
        while not env.done and self.steps < cfg.total_steps:
            eps = epsilon_at(self.steps, cfg)
            a = act(self.online, obs, eps, rng)
            res = env.step(a)
            # horizon truncation is not a terminal state for bootstrapping
            terminal = res.reason == POPULATION_EXCEEDED
            self.buffer.add(obs, a, res.reward, res.observation, terminal)
            obs = res.observation
            ret += res.reward
            length += 1
            self.steps += 1

        losses = []
        if self.steps > cfg.learning_starts:
            for _ in range(length * cfg.gradient_steps):
                losses.append(self._learn())
        rec = EpisodeRecord(
            episode=len(self.log.episodes),
            end_step=self.steps,
            length=length,
            ret=ret,
            cost=episode_cost(env.trajectory()),
            reason=env.reason or "budget",
            epsilon=eps,
            gradient_steps=self.grad_steps,
            loss_mean=float(np.mean(losses)) if losses else 0.0,
            loss_max=float(np.max(losses)) if losses else 0.0,
        )
        self.log.episodes.append(rec)
        return rec

    def _learn(self) -> float:
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        y = double_q_targets(batch, self.online, self.target, self.cfg.gamma)
        loss = gradient_step(self.online, batch, y, self.opt)
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_update_interval == 0:
            if self.cfg.polyak == 1.0:
                self.target.load_from(self.online)
            else:
                tau = self.cfg.polyak
                for k in LAYER_ORDER:
                    self.target.params[k] *= 1.0 - tau
                    self.target.params[k] += tau * self.online.params[k]
        return loss

    def train(self, until: int | None = None, checkpoint_every: int | None = None,
              checkpoint_dir: str | Path | None = None, progress=None) -> TrainingLog:
        """Run episodes until ``until`` (default: the config budget) env steps."""
        stop = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        next_ckpt = None
        if checkpoint_every:
            next_ckpt = (self.steps // checkpoint_every + 1) * checkpoint_every
        while self.steps < stop:
            rec = self.run_episode()
            if progress is not None:
                progress(rec)
            if next_ckpt is not None and self.steps >= next_ckpt and checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"ckpt_{self.steps:07d}.npz"
                save_checkpoint(self, path)
                self.log.checkpoints.append((self.steps, str(path)))
                next_ckpt = (self.steps // checkpoint_every + 1) * checkpoint_every
        return self.log


def train_agent(env_cfg: EnvConfig, cfg: DQNConfig, progress=None) -> tuple[QNetwork, TrainingLog]:
    trainer = DQNTrainer(env_cfg, cfg)
    trainer.train(progress=progress)
    return trainer.online, trainer.log


class GreedyController:
    """Acts greedily on the growth-rate observation only."""

    def __init__(self, net: QNetwork):
        self.net = net

    def reset(self) -> None:
        pass

    def __call__(self, observation, phi=None) -> int:
        return greedy(q_forward(self.net, observation))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(trainer: DQNTrainer, path: str | Path, include_buffer: bool = True) -> None:
    """Write an ``.npz`` container: a JSON header plus flat arrays.

    Header: schema id, env and DQN config echo, step counters, RNG state and
    the layer order of the flat weight vectors.
    """
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "layer_order": list(LAYER_ORDER),
        "env_config": trainer.env_cfg.to_dict(),
        "dqn_config": trainer.cfg.to_dict(),
        "steps": trainer.steps,
        "grad_steps": trainer.grad_steps,
        "adam_t": trainer.opt.t,
        "rng_state": trainer.rng.bit_generator.state,
        "buffer": {"pos": trainer.buffer.pos, "size": trainer.buffer.size} if include_buffer else None,
        "episodes": [asdict(r) for r in trainer.log.episodes],
    }
    arrays = {
        "online": trainer.online.flat(),
        "target": trainer.target.flat(),
        "adam_m": np.concatenate([trainer.opt.m[k].ravel() for k in LAYER_ORDER]),
        "adam_v": np.concatenate([trainer.opt.v[k].ravel() for k in LAYER_ORDER]),
    }
    if include_buffer:
        b = trainer.buffer
        arrays.update(buf_obs=b.obs[: b.size], buf_next=b.next_obs[: b.size],
                      buf_actions=b.actions[: b.size], buf_rewards=b.rewards[: b.size],
                      buf_dones=b.dones[: b.size])
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def _read_header(data) -> dict:
    try:
        header = json.loads(str(data["header"]))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"unreadable checkpoint header: {exc}") from None
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"checkpoint schema {header.get('schema')!r} != {CHECKPOINT_SCHEMA!r}")
    if header.get("layer_order") != list(LAYER_ORDER):
        raise ValueError("checkpoint layer order does not match")
    return header


def load_checkpoint(path: str | Path) -> DQNTrainer:
    """Rebuild a trainer that continues exactly where the saved one stopped."""
    with np.load(path, allow_pickle=False) as data:
        header = _read_header(data)
        env_cfg = EnvConfig.from_dict(header["env_config"])
        cfg = DQNConfig.from_dict(header["dqn_config"])
        trainer = DQNTrainer(env_cfg, cfg)
        trainer.online.set_flat(data["online"])
        trainer.target.set_flat(data["target"])
        m, v = QNetwork(env_cfg.frames, 2, cfg.hidden), QNetwork(env_cfg.frames, 2, cfg.hidden)
        m.set_flat(data["adam_m"])
        v.set_flat(data["adam_v"])
        trainer.opt.m, trainer.opt.v = m.params, v.params
        trainer.opt.t = header["adam_t"]
        trainer.steps = header["steps"]
        trainer.grad_steps = header["grad_steps"]
        trainer.rng.bit_generator.state = header["rng_state"]
        trainer.log.episodes = [EpisodeRecord(**r) for r in header["episodes"]]
        if header["buffer"] is not None:
            b, n = trainer.buffer, header["buffer"]["size"]
            b.obs[:n] = data["buf_obs"]
            b.next_obs[:n] = data["buf_next"]
            b.actions[:n] = data["buf_actions"]
            b.rewards[:n] = data["buf_rewards"]
            b.dones[:n] = data["buf_dones"]
            b.pos, b.size = header["buffer"]["pos"], n
    return trainer


def load_network(path: str | Path) -> QNetwork:
    with np.load(path, allow_pickle=False) as data:
        header = _read_header(data)
        cfg = DQNConfig.from_dict(header["dqn_config"])
        net = QNetwork(header["env_config"]["frames"], 2, cfg.hidden)
        net.set_flat(data["online"])
    return net
