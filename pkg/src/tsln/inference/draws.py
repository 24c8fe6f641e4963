"""Posterior draw container and its on-disk format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

__all__ = ["DrawMatrix", "write_draws", "read_draws"]


@dataclass
class DrawMatrix:
    """Post-warmup draws, chain-major: ``values[chain, draw, param]``.

    ``stats`` holds per-chain sampler statistics (``divergences``,
    ``step_size``, ``n_steps``, ``accept_rate``).
    """

    values: np.ndarray
    names: list[str]
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[2] != len(self.names):
            raise ValueError("values must be (chains, draws, len(names))")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("draw matrix contains non-finite values")

    @property
    def chains(self) -> int:
        return self.values.shape[0]

    @property
    def draws(self) -> int:
        return self.values.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def flat(self) -> np.ndarray:
        """All draws stacked: shape ``(chains * draws, params)``."""
        return self.values.reshape(-1, self.values.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, :, self.index(name)]


def write_draws(dm: DrawMatrix, out_dir, prefix: str = "draws", diagnostics: dict | None = None) -> list[Path]:
    """One CSV per chain plus a JSON diagnostics sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(dm.chains):
        p = out / f"{prefix}_chain{c}.csv"
        pd.DataFrame(dm.values[c], columns=dm.names).to_csv(p, index=False, float_format="%.10g")
        paths.append(p)
    if diagnostics is not None:
        with open(out / f"{prefix}_diagnostics.json", "w") as fh:
            json.dump(diagnostics, fh, indent=2, sort_keys=True, default=_jsonable)
    return paths


def read_draws(out_dir, prefix: str = "draws") -> DrawMatrix:
    paths = sorted(Path(out_dir).glob(f"{prefix}_chain*.csv"), key=lambda p: int(p.stem.rsplit("chain", 1)[1]))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_chain*.csv files in {out_dir}")
    frames = [pd.read_csv(p) for p in paths]
    names = list(frames[0].columns)
    return DrawMatrix(np.stack([f.to_numpy(dtype=float) for f in frames]), names)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))
