"""Analytic grasp-stability environment and PPO refinement of a seed grasp.

The environment is a geometric proxy for a physics hand: eight finger rays
sweep from the palm as their joints close, contact is a ray hit against the
solid occupancy grid, and an episode succeeds when at least six fingers
make contact with the grasp target near the surface. Rewards are strictly
binary. The grasp point is drawn once per episode inside the +-3 cm
tolerance cube; actions move only the eight joints.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .retrieval import GraspStrategy
from .voxel import PointCloud, VoxelGrid, devoxelize

JOINT_LIMITS = (0.0, np.pi / 2.0)
LOG_2PI = float(np.log(2.0 * np.pi))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Observation:
    """Hand-to-object relative pose (position + unit quaternion), distance to
    the object surface, and a per-joint contact-force proxy."""

    rel_position: np.ndarray  # (3,) palm - object centroid
    wrist_quat: np.ndarray  # (4,)
    distance: float  # palm to nearest occupied voxel center
    forces: np.ndarray  # (8,), >= 0

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.rel_position, self.wrist_quat, [self.distance], self.forces]
        )


OBS_DIM = 16
N_JOINTS = 8


class GraspEnv:
    """Episodic grasp proxy around one object and one seed strategy.

    Geometry: the palm sits `standoff` behind the grasp target along the
    wrist approach axis; eight knuckles ring the palm. A joint angle sweeps
    its finger ray from the approach direction toward the ring axis, and the
    finger stops (contacts) at the first sweep angle whose ray hits the
    solid grid, so contact is monotone in the joint angle. Closure succeeds
    when >= min_contacts fingers touch and the grasp target lies within one
    voxel of the surface (distance to the nearest occupied voxel center).
    """

    def __init__(
        self,
        cloud: PointCloud,
        grid: VoxelGrid,
        seed_strategy: GraspStrategy,
        tolerance: float = 0.03,
        max_steps: int = 20,
        min_contacts: int = 6,
        standoff: float = 0.08,
        palm_radius: float = 0.09,
        finger_length: float = 0.12,
        sweep_angles: int = 91,
    ):
        if grid.count() == 0:
            raise ValueError("grasp environment needs a nonempty solid grid")
        if tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {tolerance}")
        self.cloud = cloud
        self.grid = grid
        self.seed = seed_strategy
        self.tolerance = float(tolerance)
        self.max_steps = int(max_steps)
        self.min_contacts = int(min_contacts)
        self.standoff = float(standoff)
        self.palm_radius = float(palm_radius)
        self.finger_length = float(finger_length)
        self._dense = grid.dense()
        self._centers_tree = cKDTree(devoxelize(grid).points)
        self._centroid = cloud.centroid() if len(cloud) else devoxelize(grid).centroid()
        rot = quat_to_matrix(seed_strategy.wrist_quat)
        self._approach = rot @ np.array([0.0, 0.0, -1.0])  # identity quat approaches downward
        self._radial_u = rot @ np.array([1.0, 0.0, 0.0])
        self._radial_v = rot @ np.array([0.0, 1.0, 0.0])
        self._sweep = np.linspace(JOINT_LIMITS[0], JOINT_LIMITS[1], sweep_angles)
        # episode state
        self.offset = np.zeros(3)
        self.joints = np.array(seed_strategy.joint_angles)
        self.steps = 0
        self._contact_angle = np.full(N_JOINTS, np.inf)
        self._contact_t = np.full(N_JOINTS, np.inf)
        self._near_surface = False
        self._palm = np.zeros(3)

    # -- geometry ----------------------------------------------------------

    def _occupied_at(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((points - self.grid.origin) / self.grid.voxel_size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(self.grid.dims)), axis=-1)
        out = np.zeros(points.shape[:-1], dtype=bool)
        if ok.any():
            sel = idx[ok]
            out[ok] = self._dense[sel[:, 0], sel[:, 1], sel[:, 2]]
        return out

    def _precompute_contacts(self, grasp_point: np.ndarray):
        """First contact angle/range per finger over the closing sweep."""
        self._palm = grasp_point - self.standoff * self._approach
        psis = 2.0 * np.pi * np.arange(N_JOINTS) / N_JOINTS
        radial = np.outer(np.cos(psis), self._radial_u) + np.outer(np.sin(psis), self._radial_v)
        knuckles = self._palm + self.palm_radius * radial  # (8, 3)
        cos_t = np.cos(self._sweep)[None, :, None]
        sin_t = np.sin(self._sweep)[None, :, None]
        dirs = cos_t * self._approach[None, None, :] - sin_t * radial[:, None, :]  # (8, A, 3)
        step = self.grid.voxel_size / 2.0
        ts = np.arange(step, self.finger_length + step, step)  # (T,)
        pts = knuckles[:, None, None, :] + ts[None, None, :, None] * dirs[:, :, None, :]
        hits = self._occupied_at(pts)  # (8, A, T)
        any_hit = hits.any(axis=2)
        first_t = np.where(any_hit, ts[np.argmax(hits, axis=2)], np.inf)
        self._contact_angle = np.full(N_JOINTS, np.inf)
        self._contact_t = np.full(N_JOINTS, np.inf)
        for j in range(N_JOINTS):
            rows = np.nonzero(any_hit[j])[0]
            if rows.size:
                self._contact_angle[j] = self._sweep[rows[0]]
                self._contact_t[j] = first_t[j, rows[0]]
        dist, _ = self._centers_tree.query(grasp_point)
        self._near_surface = bool(dist <= self.grid.voxel_size)
        self._palm_dist = float(self._centers_tree.query(self._palm)[0])

    def _forces(self) -> np.ndarray:
        touching = self.joints >= self._contact_angle
        frac = np.where(touching, 1.0 - self._contact_t / self.finger_length, 0.0)
        return np.clip(frac, 0.0, 1.0)

    def _observation(self) -> Observation:
        return Observation(
            rel_position=self._palm - self._centroid,
            wrist_quat=self.seed.wrist_quat.copy(),
            distance=self._palm_dist,
            forces=self._forces(),
        )

    def _closure(self) -> bool:
        touching = int((self.joints >= self._contact_angle).sum())
        return self._near_surface and touching >= self.min_contacts

    # -- episode API ---------------------------------------------------------

    def reset(self, rng: np.random.Generator, offset=None) -> Observation:
        """Start an episode: grasp-point offset uniform in the tolerance cube
        (or as given), joints at the seed strategy."""
        if offset is None:
            offset = rng.uniform(-self.tolerance, self.tolerance, size=3)
        offset = np.asarray(offset, dtype=np.float64).reshape(3)
        if np.any(np.abs(offset) > self.tolerance + 1e-12):
            raise ValueError(f"offset {offset} outside +-{self.tolerance} tolerance")
        self.offset = offset
        self.joints = np.clip(np.array(self.seed.joint_angles), *JOINT_LIMITS)
        self.steps = 0
        self._precompute_contacts(self.seed.grasp_point + offset)
        return self._observation()

    def step(self, action) -> tuple[Observation, float, bool]:
        """Apply eight joint deltas (clamped to limits); binary terminal reward."""
        action = np.asarray(action, dtype=np.float64).reshape(N_JOINTS)
        if not np.all(np.isfinite(action)):
            raise ValueError(f"action must be finite, got {action}")
        self.joints = np.clip(self.joints + action, *JOINT_LIMITS)
        self.steps += 1
        closed = self._closure()
        done = closed or self.steps >= self.max_steps
        reward = 1.0 if (done and closed) else 0.0
        return self._observation(), reward, done


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_batch: int = 4
    minibatch: int = 64
    hidden: int = 64
    lr: float = 3e-4
    seed: int = 0
    episodes: int = 1000
    batch_episodes: int = 20
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    action_scale: float = 0.1  # rad per step after tanh squashing
    init_log_std: float = -0.7
    eval_episodes: int = 100

    def __post_init__(self):
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        for name in ("gamma", "gae_lambda"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        return cls(**d)


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, OBS_DIM)
    actions: np.ndarray  # (T, 8) raw gaussian samples (pre-squash)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    terminal: bool = True

    def __post_init__(self):
        n = len(self.observations)
        for name in ("actions", "log_probs", "rewards", "values"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trajectory field {name} length mismatch")
        if n == 0:
            raise ValueError("empty trajectory")
        if self.terminal and self.rewards[-1] not in (0.0, 1.0):
            raise ValueError(f"terminal reward must be binary, got {self.rewards[-1]}")


def gae_advantages(traj: Trajectory, gamma: float, lam: float) -> np.ndarray:
    """Raw (pre-normalization) generalized advantage estimates.

    Terminal episodes bootstrap zero; batch-level normalization happens when
    rollouts are assembled for an update.
    """
    t = len(traj.rewards)
    next_values = np.append(traj.values[1:], 0.0 if traj.terminal else traj.values[-1])
    deltas = traj.rewards + gamma * next_values - traj.values
    if traj.terminal and t > 0:
        deltas[-1] = traj.rewards[-1] - traj.values[-1]
    adv = np.zeros(t)
    acc = 0.0
    for i in range(t - 1, -1, -1):
        acc = deltas[i] + gamma * lam * acc
        adv[i] = acc
    return adv


def discounted_returns(traj: Trajectory, gamma: float) -> np.ndarray:
    out = np.zeros(len(traj.rewards))
    acc = 0.0
    for i in range(len(traj.rewards) - 1, -1, -1):
        acc = traj.rewards[i] + gamma * acc
        out[i] = acc
    return out


class MlpPolicy:
    """Gaussian policy over joint deltas: tanh MLP for the mean plus a
    state-independent learned log standard deviation."""

    def __init__(self, cfg: PpoConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.params = {
            "w1": ad.he_uniform((h, OBS_DIM), OBS_DIM, rng),
            "b1": ad.zeros(h),
            "w2": ad.he_uniform((h, h), h, rng),
            "b2": ad.zeros(h),
            "w3": ad.he_uniform((N_JOINTS, h), h, rng),
            "b3": ad.zeros(N_JOINTS),
            "log_std": Tensor(np.full(N_JOINTS, cfg.init_log_std), requires_grad=True),
        }

    def parameters(self):
        return list(self.params.values())

    def mean(self, obs) -> Tensor:
        p = self.params
        x = ad.tanh(ad.linear(obs, p["w1"], p["b1"]))
        x = ad.tanh(ad.linear(x, p["w2"], p["b2"]))
        return ad.linear(x, p["w3"], p["b3"])

    def log_prob(self, obs, actions) -> Tensor:
        """Diagonal-gaussian log density of raw actions, (N,)."""
        mean = self.mean(obs)
        log_std = self.params["log_std"]
        std = ad.exp(log_std)
        z = ad.div(ad.sub(actions, mean), std)
        per = ad.add(ad.square(z), ad.add(ad.mul(log_std, 2.0), LOG_2PI))
        return ad.mul(ad.tsum(per, axis=1), -0.5)

    def entropy(self) -> Tensor:
        return ad.tsum(ad.add(self.params["log_std"], 0.5 * (1.0 + LOG_2PI)))


class MlpValue:
    def __init__(self, cfg: PpoConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.params = {
            "w1": ad.he_uniform((h, OBS_DIM), OBS_DIM, rng),
            "b1": ad.zeros(h),
            "w2": ad.he_uniform((h, h), h, rng),
            "b2": ad.zeros(h),
            "w3": ad.he_uniform((1, h), h, rng),
            "b3": ad.zeros(1),
        }

    def parameters(self):
        return list(self.params.values())

    def forward(self, obs) -> Tensor:
        p = self.params
        x = ad.tanh(ad.linear(obs, p["w1"], p["b1"]))
        x = ad.tanh(ad.linear(x, p["w2"], p["b2"]))
        return ad.linear(x, p["w3"], p["b3"]).reshape((-1,))


def rollout_episode(
    env: GraspEnv,
    policy: MlpPolicy,
    value_fn: MlpValue,
    rng: np.random.Generator,
    cfg: PpoConfig,
    deterministic: bool = False,
    offset=None,
) -> Trajectory:
    obs = env.reset(rng, offset=offset)
    rows, actions, logps, rewards, values = [], [], [], [], []
    log_std = policy.params["log_std"].data
    std = np.exp(log_std)
    done = False
    while not done:
        vec = obs.vector()
        with ad.no_grad():
            mean = policy.mean(Tensor(vec[None, :])).data[0]
            value = float(value_fn.forward(Tensor(vec[None, :])).data[0])
        if deterministic:
            u = mean
        else:
            u = mean + std * rng.standard_normal(N_JOINTS)
        logp = -0.5 * float(np.sum(((u - mean) / std) ** 2 + 2.0 * log_std + LOG_2PI))
        obs, reward, done = env.step(np.tanh(u) * cfg.action_scale)
        rows.append(vec)
        actions.append(u)
        logps.append(logp)
        rewards.append(reward)
        values.append(value)
    return Trajectory(
        np.asarray(rows), np.asarray(actions), np.asarray(logps), np.asarray(rewards), np.asarray(values)
    )


def assemble_batch(trajectories: list[Trajectory], cfg: PpoConfig) -> dict:
    """Stack rollouts and normalize advantages to zero mean, unit variance."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    advs = np.concatenate([gae_advantages(t, cfg.gamma, cfg.gae_lambda) for t in trajectories])
    rets = np.concatenate([discounted_returns(t, cfg.gamma) for t in trajectories])
    advs = (advs - advs.mean()) / (advs.std() + 1e-8)
    return {
        "observations": np.concatenate([t.observations for t in trajectories]),
        "actions": np.concatenate([t.actions for t in trajectories]),
        "log_probs": np.concatenate([t.log_probs for t in trajectories]),
        "advantages": advs,
        "returns": rets,
    }


def ppo_update(
    policy: MlpPolicy,
    value_fn: MlpValue,
    batch: dict,
    cfg: PpoConfig,
    opt: Adam,
    rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate update with value MSE and entropy bonus.

    Runs cfg.epochs_per_batch passes of shuffled minibatches; returns the
    mean loss terms over all minibatches.
    """
    n = len(batch["observations"])
    if n == 0:
        raise ValueError("ppo_update needs a nonempty batch")
    sums = np.zeros(3)
    count = 0
    for _ in range(cfg.epochs_per_batch):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            idx = perm[lo : lo + cfg.minibatch]
            obs = Tensor(batch["observations"][idx])
            acts = Tensor(batch["actions"][idx])
            old_logp = Tensor(batch["log_probs"][idx])
            adv = Tensor(batch["advantages"][idx])
            rets = Tensor(batch["returns"][idx])

            ad.clear_tape()
            logp = policy.log_prob(obs, acts)
            ratio = ad.exp(ad.sub(logp, old_logp))
            clipped = ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
            surrogate = ad.minimum(ad.mul(ratio, adv), ad.mul(clipped, adv))
            policy_loss = ad.mul(ad.tmean(surrogate), -1.0)
            values = value_fn.forward(obs)
            value_loss = ad.tmean(ad.square(ad.sub(values, rets)))
            entropy = policy.entropy()
            total = ad.add(
                ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)),
                ad.mul(entropy, -cfg.entropy_coef),
            )
            if not np.isfinite(total.data):
                raise RuntimeError(f"non-finite PPO loss: {total.data}")
            opt.zero_grad()
            ad.backward(total)
            opt.step()
            ad.clear_tape()
            sums += (float(policy_loss.data), float(value_loss.data), float(entropy.data))
            count += 1
    return {
        "policy_loss": sums[0] / count,
        "value_loss": sums[1] / count,
        "entropy": sums[2] / count,
    }


@dataclass
class RefineResult:
    strategy: GraspStrategy
    eval_success_rate: float
    train_success_rate: float  # over the final up-to-100 training episodes
    episodes: int


def refine_grasp(
    cloud: PointCloud,
    grid: VoxelGrid,
    seed_strategy: GraspStrategy,
    cfg: PpoConfig,
    **env_kwargs,
) -> RefineResult:
    """Train a per-object policy for cfg.episodes episodes, then evaluate the
    deterministic policy over cfg.eval_episodes fresh episodes.

    The refined strategy keeps the seed grasp point and wrist orientation
    and adopts the joint vector reached by a deterministic zero-offset
    episode under the trained policy.
    """
    env = GraspEnv(cloud, grid, seed_strategy, **env_kwargs)
    rng = np.random.default_rng(cfg.seed)
    policy = MlpPolicy(cfg, rng)
    value_fn = MlpValue(cfg, rng)
    opt = Adam(policy.parameters() + value_fn.parameters(), lr=cfg.lr)
    episode_rewards = []
    done_eps = 0
    while done_eps < cfg.episodes:
        todo = min(cfg.batch_episodes, cfg.episodes - done_eps)
        trajs = [rollout_episode(env, policy, value_fn, rng, cfg) for _ in range(todo)]
        episode_rewards.extend(float(t.rewards[-1]) for t in trajs)
        ppo_update(policy, value_fn, assemble_batch(trajs, cfg), cfg, opt, rng)
        done_eps += todo
    successes = 0
    for _ in range(cfg.eval_episodes):
        traj = rollout_episode(env, policy, value_fn, rng, cfg, deterministic=True)
        successes += int(traj.rewards[-1] == 1.0)
    eval_rate = successes / cfg.eval_episodes
    rollout_episode(env, policy, value_fn, rng, cfg, deterministic=True, offset=np.zeros(3))
    refined = GraspStrategy(seed_strategy.grasp_point, seed_strategy.wrist_quat, env.joints)
    tail = episode_rewards[-100:]
    return RefineResult(refined, eval_rate, float(np.mean(tail)), cfg.episodes)
