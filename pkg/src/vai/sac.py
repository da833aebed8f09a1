"""Soft Actor-Critic from stacked pixel observations.

Critic and actor share a convolutional encoder; only the critic loss updates
it (the actor sees detached features). Target critics track the online
critics by Polyak averaging.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vai.checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from vai.training import check_finite

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0


@dataclass
class SacConfig:
    lr: float = 1e-3
    discount: float = 0.99
    tau: float = 0.01
    batch_size: int = 128
    init_temperature: float = 0.1
    feature_dim: int = 50
    hidden: int = 256
    downsample: int = 2
    target_entropy: float | None = None    # defaults to -action_dim


class PixelEncoder(nn.Module):
    def __init__(self, obs_shape: tuple[int, int, int], feature_dim: int, downsample: int = 1):
        super().__init__()
        h, w, c = obs_shape
        self.pool = nn.AvgPool2d(downsample) if downsample > 1 else nn.Identity()
        self.convs = nn.Sequential(
            nn.Conv2d(c, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=1, padding=1), nn.ReLU(),
        )
        with torch.no_grad():
            n = self.convs(self.pool(torch.zeros(1, c, h, w))).numel()
        self.head = nn.Sequential(nn.Linear(n, feature_dim), nn.LayerNorm(feature_dim))

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        # obs: (B, H, W, C) uint8 or float in [0, 1]
        x = obs.permute(0, 3, 1, 2)
        x = x.float() / 255.0 if x.dtype == torch.uint8 else x.float()
        x = self.convs(self.pool(x))
        return torch.tanh(self.head(x.flatten(1)))


def _mlp(inp, hidden, out):
    return nn.Sequential(nn.Linear(inp, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, out))


class Critic(nn.Module):
    def __init__(self, obs_shape, action_dim, cfg: SacConfig):
        super().__init__()
        self.encoder = PixelEncoder(obs_shape, cfg.feature_dim, cfg.downsample)
        self.q1 = _mlp(cfg.feature_dim + action_dim, cfg.hidden, 1)
        self.q2 = _mlp(cfg.feature_dim + action_dim, cfg.hidden, 1)

    def forward(self, obs, action, detach_encoder: bool = False):
        h = self.encoder(obs)
        if detach_encoder:
            h = h.detach()
        return self.q(h, action)

    def q(self, h, action):
        ha = torch.cat([h, action], dim=-1)
        return self.q1(ha), self.q2(ha)


class Actor(nn.Module):
    def __init__(self, action_dim, cfg: SacConfig):
        super().__init__()
        self.trunk = _mlp(cfg.feature_dim, cfg.hidden, 2 * action_dim)

    def forward(self, h: torch.Tensor, generator: torch.Generator | None = None, deterministic: bool = False):
        mu, log_std = self.trunk(h).chunk(2, dim=-1)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (torch.tanh(log_std) + 1)
        if deterministic:
            return torch.tanh(mu), None
        std = log_std.exp()
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        pre = mu + noise * std
        action = torch.tanh(pre)
        log_prob = (-0.5 * noise ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1, keepdim=True)
        log_prob = log_prob - torch.log(F.relu(1 - action ** 2) + 1e-6).sum(-1, keepdim=True)
        return action, log_prob


def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for tp, sp in zip(target.parameters(), source.parameters()):
            tp.mul_(1 - tau).add_(sp, alpha=tau)


class SacAgent:
    def __init__(self, obs_shape: tuple[int, int, int], action_dim: int, config: SacConfig | None = None, seed: int = 0):
        self.config = config or SacConfig()
        cfg = self.config
        torch.manual_seed(seed)
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.critic = Critic(obs_shape, action_dim, cfg)
        self.critic_target = copy.deepcopy(self.critic)
        self.actor = Actor(action_dim, cfg)
        self.log_alpha = torch.tensor(math.log(cfg.init_temperature), requires_grad=True)
        self.target_entropy = float(-action_dim if cfg.target_entropy is None else cfg.target_entropy)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.lr)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=cfg.lr)
        self.generator = torch.Generator().manual_seed(seed)
        self.updates = 0

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def act(self, obs: np.ndarray, deterministic: bool = True) -> np.ndarray:
        with torch.no_grad():
            h = self.critic.encoder(torch.as_tensor(obs)[None])
            action, _ = self.actor(h, self.generator, deterministic=deterministic)
        return action[0].numpy().astype(np.float64)

    def critic_target_values(self, batch) -> torch.Tensor:
        obs, action, reward, next_obs, done = _as_tensors(batch)
        with torch.no_grad():
            h_next = self.critic.encoder(next_obs)
            next_action, next_logp = self.actor(h_next, self.generator)
            tq1, tq2 = self.critic_target(next_obs, next_action)
            v = torch.min(tq1, tq2) - self.alpha.detach() * next_logp
            return reward + (1.0 - done) * self.config.discount * v

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        arrays.update(module_arrays(self.critic, "critic."))
        arrays.update(module_arrays(self.critic_target, "critic_target."))
        arrays.update(module_arrays(self.actor, "actor."))
        arrays["log_alpha"] = self.log_alpha.detach().numpy().copy()
        return arrays


def _as_tensors(batch):
    obs, action, reward, next_obs, done = batch
    return (
        torch.as_tensor(obs),
        torch.as_tensor(action, dtype=torch.float32),
        torch.as_tensor(reward, dtype=torch.float32).reshape(-1, 1),
        torch.as_tensor(next_obs),
        torch.as_tensor(done, dtype=torch.float32).reshape(-1, 1),
    )


def sac_update(agent: SacAgent, batch) -> dict[str, float]:
    """One gradient step on critics, actor and temperature, then target update.

    ``batch`` is ``(obs, action, reward, next_obs, done)`` with observations
    shaped (B, H, W, C).
    """
    obs, action, _, _, _ = tensors = _as_tensors(batch)
    target_q = agent.critic_target_values(tensors)
    h_all = agent.critic.encoder(obs)
    q1, q2 = agent.critic.q(h_all, action)
    critic_loss = F.mse_loss(q1, target_q) + F.mse_loss(q2, target_q)
    step = agent.updates
    check_finite("critic", step, critic_loss)
    agent.critic_opt.zero_grad()
    critic_loss.backward()
    agent.critic_opt.step()

    # the actor reuses the (detached) features from the critic pass
    h = h_all.detach()
    pi, logp = agent.actor(h, agent.generator)
    aq1, aq2 = agent.critic.q(h, pi)
    actor_loss = (agent.alpha.detach() * logp - torch.min(aq1, aq2)).mean()
    check_finite("actor", step, actor_loss)
    agent.actor_opt.zero_grad()
    actor_loss.backward()
    agent.actor_opt.step()

    alpha_loss = -(agent.log_alpha * (logp.detach() + agent.target_entropy)).mean()
    check_finite("temperature", step, alpha_loss)
    agent.alpha_opt.zero_grad()
    alpha_loss.backward()
    agent.alpha_opt.step()

    soft_update(agent.critic_target, agent.critic, agent.config.tau)
    agent.updates += 1
    return {
        "critic_loss": float(critic_loss.detach()),
        "actor_loss": float(actor_loss.detach()),
        "alpha_loss": float(alpha_loss.detach()),
        "alpha": float(agent.alpha.detach()),
        "entropy": float(-logp.detach().mean()),
    }


def save_agent(agent: SacAgent, path, extra_config: dict | None = None) -> None:
    cfg = {"sac": dataclasses.asdict(agent.config), "obs_shape": list(agent.obs_shape),
           "action_dim": agent.action_dim, **(extra_config or {})}
    save_checkpoint(path, "sac", cfg, agent.state_arrays())


def load_agent(path) -> tuple[SacAgent, dict]:
    meta, arrays = load_checkpoint(path, kind="sac")
    cfg = meta["config"]
    agent = SacAgent(tuple(cfg["obs_shape"]), cfg["action_dim"], SacConfig(**cfg["sac"]))
    load_module_arrays(agent.critic, arrays, "critic.")
    load_module_arrays(agent.critic_target, arrays, "critic_target.")
    load_module_arrays(agent.actor, arrays, "actor.")
    with torch.no_grad():
        agent.log_alpha.copy_(torch.from_numpy(arrays["log_alpha"]).reshape(()))
    return agent, cfg
