"""Construction, evaluation, and merging of low-rank adapters on a dense layer.

Supported methods over a d x k base weight:

  full    every entry of the weight trains (reference upper bound)
  lora    additive low-rank update b @ a; b starts at zero, a Kaiming-uniform
  dora    per-column magnitude times normalized direction, LoRA-style factors
  pissa   factors start from the top-r SVD of the weight, spectral residual frozen
  dude    dora's magnitude/direction split with pissa's SVD initialization
  dude_a  dude variant: singular values folded entirely into a (b = u_r)
  dude_b  dude variant: singular values folded entirely into b (a = v_r.T)

Every initializer leaves the effective weight equal to the original weight,
so attaching an adapter never changes the layer's output before training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_matrix, column_norms, svd, truncate_svd

__all__ = [
    "METHODS",
    "MAGNITUDE_METHODS",
    "SVD_INIT_METHODS",
    "AdapterConfig",
    "AdapterState",
    "kaiming_uniform",
    "init_full",
    "init_lora",
    "init_dora",
    "init_pissa",
    "init_dude",
    "initialize",
    "effective_weight",
    "forward",
    "merge",
    "trainable_params",
    "copy_state",
]

METHODS = ("full", "lora", "dora", "pissa", "dude", "dude_a", "dude_b")
MAGNITUDE_METHODS = frozenset({"dora", "dude", "dude_a", "dude_b"})
SVD_INIT_METHODS = frozenset({"pissa", "dude", "dude_a", "dude_b"})


@dataclass
class AdapterConfig:
    method: str
    rank: int
    scaling: float = 1.0
    norm_epsilon: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not self.scaling > 0.0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")
        if self.norm_epsilon < 0.0:
            raise ValueError(f"norm_epsilon must be >= 0, got {self.norm_epsilon}")


@dataclass
class AdapterState:
    """One adapted linear layer.

    base is d x k: the frozen original weight for lora/dora, the frozen
    spectral residual for pissa/dude*, or the trainable weight for full.
    b (d x r) and a (r x k) are the low-rank factors; m (length k) is the
    per-column magnitude vector, present only for dora/dude*.
    """

    method: str
    base: np.ndarray
    b: np.ndarray
    a: np.ndarray
    m: np.ndarray | None
    config: AdapterConfig


def kaiming_uniform(rows: int, cols: int, fan_in: int, seed: int) -> np.ndarray:
    """I.i.d. uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)], seeded."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = 1.0 / np.sqrt(fan_in)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, cols))


def _check_rank(cfg: AdapterConfig, d: int, k: int) -> None:
    if cfg.rank > min(d, k):
        raise ValueError(
            f"rank {cfg.rank} out of range for a {d}x{k} layer (max {min(d, k)})"
        )


def _check_method(cfg: AdapterConfig, *expected: str) -> None:
    if cfg.method not in expected:
        raise ValueError(f"config is for {cfg.method!r}, expected one of {expected}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _guarded_column_norms(w0: np.ndarray, epsilon: float) -> np.ndarray:
    m = column_norms(w0)
    m[m == 0.0] = epsilon
    return m


def init_full(w0, cfg: AdapterConfig) -> AdapterState:
    _check_method(cfg, "full")
    w0 = as_matrix(w0, "w0")
    d, k = w0.shape
    # The factors are inert zero placeholders; the whole base trains.
    return AdapterState("full", w0.copy(), np.zeros((d, 1)), np.zeros((1, k)), None, cfg)


def init_lora(w0, cfg: AdapterConfig) -> AdapterState:
    _check_method(cfg, "lora")
    w0 = as_matrix(w0, "w0")
    d, k = w0.shape
    _check_rank(cfg, d, k)
    b = np.zeros((d, cfg.rank))
    a = kaiming_uniform(cfg.rank, k, fan_in=k, seed=cfg.seed)
    return AdapterState("lora", _freeze(w0.copy()), b, a, None, cfg)


def init_dora(w0, cfg: AdapterConfig) -> AdapterState:
    _check_method(cfg, "dora")
    w0 = as_matrix(w0, "w0")
    d, k = w0.shape
    _check_rank(cfg, d, k)
    b = np.zeros((d, cfg.rank))
    a = kaiming_uniform(cfg.rank, k, fan_in=k, seed=cfg.seed)
    m = _guarded_column_norms(w0, cfg.norm_epsilon)
    return AdapterState("dora", _freeze(w0.copy()), b, a, m, cfg)


def _svd_factors(w0: np.ndarray, cfg: AdapterConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = truncate_svd(svd(w0), cfg.rank)
    return t.u_r, t.sigma_r, t.v_r


def init_pissa(w0, cfg: AdapterConfig) -> AdapterState:
    _check_method(cfg, "pissa")
    w0 = as_matrix(w0, "w0")
    _check_rank(cfg, *w0.shape)
    u_r, sigma_r, v_r = _svd_factors(w0, cfg)
    root = np.sqrt(sigma_r)
    b = u_r * root
    # ascontiguousarray: trainable arrays must be C-contiguous so that flat
    # views (optimizers, perturbation loops) alias the real storage.
    a = np.ascontiguousarray(root[:, None] * v_r.T)
    return AdapterState("pissa", _freeze(w0 - b @ a), b, a, None, cfg)


def init_dude(w0, cfg: AdapterConfig) -> AdapterState:
    """SVD-initialized magnitude/direction adapter; cfg.method picks the
    split of the singular values between the two factors."""
    _check_method(cfg, "dude", "dude_a", "dude_b")
    w0 = as_matrix(w0, "w0")
    _check_rank(cfg, *w0.shape)
    u_r, sigma_r, v_r = _svd_factors(w0, cfg)
    if cfg.method == "dude":
        root = np.sqrt(sigma_r)
        b = u_r * root
        a = np.ascontiguousarray(root[:, None] * v_r.T)
    elif cfg.method == "dude_a":
        b = u_r.copy()
        a = np.ascontiguousarray(sigma_r[:, None] * v_r.T)
    elif cfg.method == "dude_b":
        b = u_r * sigma_r
        a = np.ascontiguousarray(v_r.T)
    m = _guarded_column_norms(w0, cfg.norm_epsilon)
    return AdapterState(cfg.method, _freeze(w0 - b @ a), b, a, m, cfg)


_INITIALIZERS = {
    "full": init_full,
    "lora": init_lora,
    "dora": init_dora,
    "pissa": init_pissa,
    "dude": init_dude,
    "dude_a": init_dude,
    "dude_b": init_dude,
}


def initialize(w0, cfg: AdapterConfig) -> AdapterState:
    return _INITIALIZERS[cfg.method](w0, cfg)


def effective_weight(state: AdapterState) -> np.ndarray:
    """Collapsed d x k weight the layer currently realizes.

    full: base. lora/pissa: base + scaling * b @ a. dora/dude*: each column
    of base + scaling * b @ a is normalized and rescaled by its magnitude,
    with norm_epsilon added to the denominator so zero columns stay defined.
    """
    if state.method == "full":
        return state.base.copy()
    v = state.base + state.config.scaling * (state.b @ state.a)
    if state.m is None:
        return v
    n = np.linalg.norm(v, axis=0) + state.config.norm_epsilon
    return v * (state.m / n)


def forward(state: AdapterState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = state.base.shape[1]
    if x.shape != (k,):
        raise ValueError(f"input length mismatch: expected {k}, got {x.shape}")
    return effective_weight(state) @ x


def merge(state: AdapterState) -> np.ndarray:
    """Deployment-time collapse: a plain dense weight equivalent to the adapter."""
    return effective_weight(state)


def trainable_params(state: AdapterState) -> list[tuple[str, np.ndarray]]:
    """Named trainable arrays, in fixed order; the base is frozen except for full."""
    if state.method == "full":
        return [("base", state.base)]
    params = [("b", state.b), ("a", state.a)]
    if state.m is not None:
        params.append(("m", state.m))
    return params


def copy_state(state: AdapterState) -> AdapterState:
    """Independent, fully writable copy (used by perturbation-based checks)."""
    return replace(
        state,
        base=state.base.copy(),
        b=state.b.copy(),
        a=state.a.copy(),
        m=None if state.m is None else state.m.copy(),
    )
