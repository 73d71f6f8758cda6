"""Flip-flop languages: generator, validator, prediction-set targets, a
hand-built single-layer network that models the language exactly, and the
fixed-context chance-level construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import SequenceBatch
from ..dcls import make_l
from ..layers import LinearParams
from ..mingru import GruParams
from ..model import LayerParams, NetworkConfig, NetworkParams
from ..numcore import Rng

SIGMA = ("w", "r", "i", "0", "1")
W, R, I, ZERO, ONE = range(5)
N_SYMBOLS = len(SIGMA)

# prediction sets, in class-id order
P_VALUE, P_INSTR, P_ZERO, P_ONE = range(4)
SET_NAMES = ("{0,1}", "{w,r,i}", "{0}", "{1}")
SET_TEMPLATES = np.array([
    [0, 0, 0, 1, 1],
    [1, 1, 1, 0, 0],
    [0, 0, 0, 1, 0],
    [0, 0, 0, 0, 1],
], dtype=np.float64)

OOD_P_IGNORE = 0.98


@dataclass
class FlipFlopConfig:
    T: int = 512
    p_ignore: float = 0.8
    seed: int = 0


def encode(text: str) -> np.ndarray:
    return np.array([SIGMA.index(tok) for tok in text.split()], dtype=np.int64)


def decode(symbols) -> str:
    return " ".join(SIGMA[s] for s in symbols)


def gen_symbols(cfg: FlipFlopConfig, n: int, rng: Rng | None = None) -> np.ndarray:
    if cfg.T % 2 or cfg.T < 2:
        raise ValueError(f"flip-flop length must be even and >= 2, got {cfg.T}")
    if n < 1:
        raise ValueError("need at least one string")
    rng = rng or Rng(cfg.seed)
    half = cfg.T // 2
    u = rng.split(0).random((n, half))
    p = cfg.p_ignore
    instr = np.where(u < p, I, np.where(u < p + (1 - p) / 2, W, R))
    instr[:, 0] = W
    vals = rng.split(1).integers(0, 2, (n, half)) + ZERO
    stored = np.full(n, -1)
    for k in range(half):
        is_w = instr[:, k] == W
        is_r = instr[:, k] == R
        assert not np.any(is_r & (stored < 0)), "read before any write"
        vals[is_r, k] = stored[is_r]
        stored = np.where(is_w, vals[:, k], stored)
    out = np.empty((n, cfg.T), dtype=np.int64)
    out[:, 0::2] = instr
    out[:, 1::2] = vals
    return out


def is_valid(symbols) -> bool:
    """Independent check of flip-flop membership, walking the string once."""
    stored = None
    expect_instr = True
    last_instr = None
    if len(symbols) == 0 or symbols[0] != W:
        return False
    for s in symbols:
        if expect_instr:
            if s not in (W, R, I):
                return False
            last_instr = s
        else:
            if s not in (ZERO, ONE):
                return False
            if last_instr == R and s != stored:
                return False
            if last_instr == W:
                stored = s
        expect_instr = not expect_instr
    return True


def prediction_set_ids(symbols: np.ndarray) -> np.ndarray:
    """Class id of the set of valid next symbols after each prefix.

    Works on (T,) or (N, T) arrays of valid (prefixes of) flip-flop strings.
    """
    sym = np.atleast_2d(symbols)
    n, T = sym.shape
    out = np.empty((n, T), dtype=np.int64)
    stored = np.full(n, -1)
    prev = np.full(n, -1)
    for t in range(T):
        s = sym[:, t]
        stored = np.where(prev == W, s, stored)
        cls = np.where((s == ZERO) | (s == ONE), P_INSTR, P_VALUE)
        cls = np.where(s == R, np.where(stored == ONE, P_ONE, P_ZERO), cls)
        out[:, t] = cls
        prev = s
    return out.reshape(np.shape(symbols))


def gen_flipflop(cfg: FlipFlopConfig, n: int, rng: Rng | None = None) -> SequenceBatch:
    sym = gen_symbols(cfg, n, rng)
    ids = prediction_set_ids(sym)
    inputs = np.eye(N_SYMBOLS, dtype=np.float32)[sym]
    targets = SET_TEMPLATES.astype(np.float32)[ids]
    return SequenceBatch(inputs, targets, "flipflop", {"set_ids": ids, "symbols": sym})


def classify_sets(outputs: np.ndarray) -> np.ndarray:
    """Map network outputs to prediction-set ids.

    Four-way outputs are read by argmax; five-way (multi-hot) outputs pick
    the nearest set template.
    """
    if outputs.shape[-1] == 4:
        return np.argmax(outputs, axis=-1)
    if outputs.shape[-1] == N_SYMBOLS:
        d = ((outputs[..., None, :] - SET_TEMPLATES) ** 2).sum(axis=-1)
        return np.argmin(d, axis=-1)
    raise ValueError(f"cannot read prediction sets from {outputs.shape[-1]} outputs")


def set_accuracy(outputs: np.ndarray, set_ids: np.ndarray) -> float:
    return float(np.mean(classify_sets(outputs) == set_ids))


# -- constructive network ----------------------------------------------------------

def oracle_config(sigma: float = 0.1) -> NetworkConfig:
    return NetworkConfig(L=1, H=2 * N_SYMBOLS, H_in=N_SYMBOLS, H_out=4, conv="L", K=2, gamma=1,
                         sigma=sigma, mixer="mingru", use_mlp=False, use_norm=False,
                         encoder_bias=False, head="classify-per-step", loss="ce", precision="f64")


def build_flipflop_oracle(M: float = 20.0, config: NetworkConfig | None = None) -> NetworkParams:
    """Single-layer network whose hidden state is [stored value, current symbol].

    Channels 0-4 of the conv output carry x_t and channels 5-9 carry x_{t-1}.
    The stored half of the gate opens only right after a ``w``; the current
    half is saturated open so it copies x_t. The decoder has no bias, so the
    constant it needs comes from the instruction slots of x_{t-1} + x_t,
    which sum to one at every step of a valid string.
    """
    cfg = config or oracle_config()
    n = N_SYMBOLS
    if cfg.L != 1 or cfg.K != 2 or cfg.H != 2 * n or cfg.H_in != n or cfg.conv != "L":
        raise ValueError("flip-flop oracle needs a single L-conv layer with 2 taps and H=2|Sigma|")
    if M < 0:
        raise ValueError("gate magnitude M must be >= 0")
    eye = np.eye(n)
    encoder = LinearParams(np.vstack([eye, eye]), np.zeros(2 * n) if cfg.encoder_bias else None)

    weights = np.zeros((2 * n, 2))
    weights[:n, 0] = 1.0  # delay 0
    weights[n:, 1] = 1.0  # delay 1
    positions = np.tile([0.0, 1.0], (2 * n, 1))
    conv = make_l(weights, positions, gamma=cfg.gamma, sigma=cfg.sigma)

    Wz = np.zeros((2 * n, 2 * n))
    bz = np.zeros(2 * n)
    Wz[:n, n + W] = 2 * M
    bz[:n] = -M
    bz[n:] = M
    Wh = np.zeros((2 * n, 2 * n))
    Wh[:n, :n] = eye
    Wh[n:, :n] = eye
    gru = GruParams(Wz, bz, Wh, np.zeros(2 * n))

    # layer output y = conv + gru = [x_t + stored, x_{t-1} + x_t]
    D = np.zeros((4, 2 * n))
    const = [n + W, n + R, n + I]
    D[P_VALUE, [W, I]] = 10
    D[P_INSTR, const] = 5
    D[P_INSTR, [W, R, I]] = -10
    D[P_ZERO, R] = 10
    D[P_ZERO, const] = -3
    D[P_ZERO, ONE] = -4
    D[P_ONE, R] = 10
    D[P_ONE, const] = -5
    D[P_ONE, ONE] = 4
    dt = cfg.dtype
    cast = lambda a: None if a is None else a.astype(dt)
    encoder = LinearParams(cast(encoder.W), cast(encoder.b))
    conv = make_l(cast(conv.weights), cast(conv.positions), conv.gamma, conv.sigma)
    gru = GruParams(*(cast(a) for _, a in gru.named()))
    return NetworkParams(cfg, encoder, [LayerParams(conv, gru, None, None)], LinearParams(cast(D), None))


def recall_strings(distance: int, n: int, T: int, rng: Rng) -> np.ndarray:
    """Strings of length T with a single ``w v`` at the start and a read
    ``distance`` symbols later; everything else is ``i`` + random value."""
    if distance % 2 or distance < 2 or distance + 2 > T:
        raise ValueError("recall distance must be even, >= 2 and fit in the string")
    sym = np.empty((n, T), dtype=np.int64)
    sym[:, 0::2] = I
    sym[:, 1::2] = rng.integers(0, 2, (n, T // 2)) + ZERO
    sym[:, 0] = W
    sym[:, distance] = R
    sym[:, distance + 1] = sym[:, 1]
    return sym


# -- fixed context window ---------------------------------------------------------

def fixed_context_chance_demo(T_c: int, n: int = 4000, recall_distance: int | None = None,
                              seed: int = 0) -> float:
    """Accuracy on the value after ``r`` of the best predictor that sees only
    the last ``T_c`` symbols (ending at the ``r``).

    Strings are ``w v`` followed by ignore/value pairs and a final ``r``. The
    Bayes-optimal window predictor is found by enumerating every joint
    assignment of ``v`` and the values visible in the window.
    """
    if T_c < 1:
        raise ValueError("context length must be >= 1")
    if n < 1:
        raise ValueError("need at least one test string")
    dist = 2 * T_c + 2 if recall_distance is None else recall_distance
    if dist % 2 or dist < 2:
        raise ValueError("recall distance must be even and >= 2")
    rng = Rng(seed)
    sym = recall_strings(dist, n, dist + 2, rng)
    lo = max(0, dist + 1 - T_c)
    window = sym[:, lo:dist + 1]
    table = _optimal_window_table(dist, lo)
    keys = [tuple(row) for row in window]
    pred = np.array([table[k] for k in keys])
    return float(np.mean(pred == sym[:, dist + 1]))


def _optimal_window_table(dist: int, lo: int) -> dict:
    """Map window contents -> Bayes-optimal guess for the stored value."""
    value_slots = [t for t in range(1, dist, 2) if t >= lo]
    v_visible = 1 >= lo
    counts: dict = {}
    n_free = len(value_slots) - (1 if v_visible else 0)
    for v in (ZERO, ONE):
        for bits in range(2 ** max(n_free, 0)):
            string = {0: W, dist: R}
            for t in range(2, dist, 2):
                string[t] = I
            string[1] = v
            free = [t for t in value_slots if t != 1]
            for j, t in enumerate(free):
                string[t] = ZERO + ((bits >> j) & 1)
            key = tuple(string[t] for t in range(lo, dist + 1))
            c = counts.setdefault(key, [0, 0])
            c[v - ZERO] += 1
    # ties go to 0
    return {k: ONE if c[1] > c[0] else ZERO for k, c in counts.items()}
