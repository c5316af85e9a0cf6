"""Training configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .errors import InvalidInputError

MODES = ("evo", "cpo-ablation", "constant-quantile-ablation",
         "no-prioritization-ablation", "no-offpolicy-ablation")
# short names accepted on the command line
MODE_ALIASES = {"cpo": "cpo-ablation", "constant-quantile": "constant-quantile-ablation",
                "no-prioritization": "no-prioritization-ablation",
                "no-offpolicy": "no-offpolicy-ablation"}


@dataclass
class TrainConfig:
    env_id: str = "hazard-grid"
    seed: int = 0
    name: str = ""
    run_dir: str = "runs"
    mode: str = "evo"
    total_steps: int = 200_000
    epoch_batch_steps: int = 4_000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    delta: float = 0.01
    cost_limit: float = 25.0
    value_iters: int = 40
    value_lr: float = 1e-3
    value_batch: int = 128
    cg_damping: float = 0.1
    cg_iters: int = 20
    cg_tol: float = 1e-8
    nu_init: float = 0.01
    alpha_nu: float = 0.01
    min_peaks: int = 10
    tail_transform: str = "identity"
    replay_capacity: int = 50_000
    replay_batch: int = 128
    p_floor: float = 1e-3
    clip_low: float = 0.1
    clip_high: float = 10.0
    is_ratio_mode: str = "product"
    k_age: int = 5
    offpolicy_fraction: float = 0.5
    eps_stability: float = 0.01
    checkpoint_every: int = 10
    log_wall_time: bool = False
    # environment knobs; 0 / negative means "environment default"
    max_episode_len: int = 0
    grid_size: int = 8
    n_hazards: int = 8
    shaping_weight: float = 1.0
    slip_prob: float = 0.0
    layout_seed: int = 0
    goal_respawn: bool = False
    shaping_offset: float = 0.0

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.gamma < 1:
            raise InvalidInputError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise InvalidInputError("gae_lambda must lie in [0, 1]")
        for key in ("delta", "value_lr", "alpha_nu", "cg_damping", "p_floor", "eps_stability"):
            if not getattr(self, key) > 0:
                raise InvalidInputError(f"{key} must be > 0")
        for key in ("epoch_batch_steps", "value_iters", "value_batch", "min_peaks",
                    "replay_capacity", "replay_batch", "cg_iters"):
            if getattr(self, key) < 1:
                raise InvalidInputError(f"{key} must be >= 1")
        if self.total_steps < 0 or self.nu_init < 0:
            raise InvalidInputError("total_steps and nu_init must be >= 0")
        if not 0 < self.clip_low <= 1 <= self.clip_high:
            raise InvalidInputError("need 0 < clip_low <= 1 <= clip_high")
        if self.is_ratio_mode not in ("literal", "product"):
            raise InvalidInputError("is_ratio_mode must be literal or product")
        if not 0 <= self.offpolicy_fraction < 1:
            raise InvalidInputError("offpolicy_fraction must lie in [0, 1)")

    @property
    def run_name(self) -> str:
        return self.name or f"{self.env_id}_{self.mode}_s{self.seed}"

    def env_kwargs(self) -> dict:
        kw = {}
        if self.max_episode_len > 0:
            kw["max_episode_len"] = self.max_episode_len
        if self.env_id == "hazard-grid":
            kw.update(size=self.grid_size, n_hazards=self.n_hazards,
                      shaping_weight=self.shaping_weight, slip_prob=self.slip_prob,
                      layout_seed=self.layout_seed, goal_respawn=self.goal_respawn,
                      shaping_offset=self.shaping_offset)
        return kw

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, raw: str, typ) -> object:
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            try:
                return int(raw.replace("_", ""))
            except ValueError:
                f = float(raw)
                if not f.is_integer():
                    raise
                return int(f)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise InvalidInputError(f"bad value for {name}: {raw!r}") from None


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise InvalidInputError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, _TYPES[key])
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    values = {}
    if path is not None:
        values.update(parse_pairs(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_pairs(overrides, "--override"))
    return TrainConfig(**values)
