"""Noisy Lorenz-63 trajectories for next-step prediction of one observed
coordinate, with the two other coordinates held back for out-of-distribution
evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..data import SequenceBatch
from ..numcore import NumericalError, Rng


@dataclass
class LorenzConfig:
    sigma_l: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    burn_in: int = 1000
    length: int = 256
    n_trajectories: int = 2000
    noise: float = 0.05  # fraction of per-dimension std
    val_fraction: float = 0.2
    seed: int = 0
    initial_state: Optional[tuple] = None
    bound: float = 1e4

    def to_dict(self) -> dict:
        return asdict(self)


def lorenz_rhs(s: np.ndarray, sigma_l: float, rho: float, beta: float) -> np.ndarray:
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([sigma_l * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def rk4_step(s: np.ndarray, dt: float, *args) -> np.ndarray:
    k1 = lorenz_rhs(s, *args)
    k2 = lorenz_rhs(s + 0.5 * dt * k1, *args)
    k3 = lorenz_rhs(s + 0.5 * dt * k2, *args)
    k4 = lorenz_rhs(s + dt * k3, *args)
    return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(s0: np.ndarray, n_steps: int, cfg: LorenzConfig, record: bool = True) -> np.ndarray:
    """RK4 from ``s0`` (N, 3); returns (N, n_steps + 1, 3) when recording."""
    if cfg.dt <= 0:
        raise ValueError(f"dt must be positive, got {cfg.dt}")
    args = (cfg.sigma_l, cfg.rho, cfg.beta)
    s = np.array(s0, dtype=np.float64)
    traj = [s] if record else None
    for k in range(n_steps):
        s = rk4_step(s, cfg.dt, *args)
        if not np.all(np.isfinite(s)) or np.max(np.abs(s)) > cfg.bound:
            raise NumericalError(f"Lorenz integration diverged at step {k}; use a smaller dt "
                                 f"(current dt={cfg.dt})")
        if record:
            traj.append(s)
    return np.stack(traj, axis=1) if record else s


def fixed_points(cfg: LorenzConfig) -> np.ndarray:
    c = np.sqrt(cfg.beta * (cfg.rho - 1))
    return np.array([[c, c, cfg.rho - 1], [-c, -c, cfg.rho - 1]])


def clean_trajectories(cfg: LorenzConfig) -> np.ndarray:
    """(N, length + 1, 3) noise-free states after burn-in."""
    if cfg.dt <= 0:
        raise ValueError(f"dt must be positive, got {cfg.dt}")
    rng = Rng(cfg.seed)
    N = cfg.n_trajectories
    if cfg.initial_state is not None:
        s0 = np.tile(np.asarray(cfg.initial_state, dtype=np.float64), (N, 1))
    else:
        s0 = rng.split(0).uniform(-1.0, 1.0, (N, 3)) * np.array([15.0, 20.0, 15.0]) + np.array([0.0, 0.0, 25.0])
    s = integrate(s0, cfg.burn_in, cfg, record=False) if cfg.burn_in else s0
    return integrate(s, cfg.length, cfg)


def gen_lorenz(cfg: LorenzConfig) -> dict[str, SequenceBatch]:
    """Train/val splits for next-step prediction of the first coordinate.

    All coordinates are standardised with the clean per-dimension statistics,
    then observed with i.i.d. Gaussian noise of ``noise`` standard deviations.
    The train split carries only the observed coordinate; the val split also
    carries the next-step unobserved coordinates (``ood_targets``) and the
    clean states aligned with each input step (``states``).
    """
    states = clean_trajectories(cfg)
    mean = states.reshape(-1, 3).mean(axis=0)
    std = states.reshape(-1, 3).std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (states - mean) / std
    noise = Rng(cfg.seed).split(1).normal(z.shape) * cfg.noise
    obs = z + noise

    inputs = obs[:, :-1, 0:1].astype(np.float32)
    targets = obs[:, 1:, 0:1].astype(np.float32)
    ood = obs[:, 1:, 1:3].astype(np.float32)
    clean = z[:, :-1].astype(np.float32)

    N = cfg.n_trajectories
    n_val = max(1, int(round(cfg.val_fraction * N))) if N > 1 else 0
    n_train = N - n_val
    train = SequenceBatch(inputs[:n_train], targets[:n_train], "lorenz")
    val = SequenceBatch(inputs[n_train:], targets[n_train:], "lorenz",
                        {"ood_targets": ood[n_train:], "states": clean[n_train:]})
    return {"train": train, "val": val}
