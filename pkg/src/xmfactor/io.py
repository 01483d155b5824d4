"""File formats, run configuration and reproducibility manifests."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .whiten import CATEGORIES

EMBEDDING_SUFFIXES = (".csv", ".npz")
# run settings that cannot change any reported number
EXECUTION_KEYS = ("out", "threads")


class InputError(FileNotFoundError):
    pass


# -- embeddings ----------------------------------------------------------------


def write_embeddings(raw: dict[str, tuple[list[str], np.ndarray]], directory: str | Path, fmt: str = "csv") -> None:
    """One file per category: ``<category>.csv`` (firm_id,v_1..v_p) or ``<category>.npz``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for cat, (ids, X) in raw.items():
        X = np.asarray(X, dtype=float)
        if fmt == "csv":
            frame = pd.DataFrame(X, columns=[f"v_{k + 1}" for k in range(X.shape[1])])
            frame.insert(0, "firm_id", list(ids))
            frame.to_csv(directory / f"{cat}.csv", index=False, float_format="%.10g")
        elif fmt == "npz":
            np.savez(directory / f"{cat}.npz", firm_ids=np.asarray(ids, dtype=str), vectors=X)
        else:
            raise ValueError(f"unknown embedding format {fmt!r}")


def read_embedding_file(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return [str(f) for f in z["firm_ids"]], np.asarray(z["vectors"], dtype=float)
    frame = pd.read_csv(path, dtype={"firm_id": str})
    if "firm_id" not in frame.columns:
        raise ValueError(f"{path}: missing firm_id column")
    if frame["firm_id"].duplicated().any():
        dup = frame.loc[frame["firm_id"].duplicated(), "firm_id"].iloc[0]
        raise ValueError(f"{path}: duplicate firm_id {dup!r}")
    return frame["firm_id"].tolist(), frame.drop(columns="firm_id").to_numpy(float)


def load_embeddings(directory: str | Path) -> dict[str, tuple[list[str], np.ndarray]]:
    """Read every ``<category>.{csv,npz}`` in ``directory`` (schema order)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"embeddings directory not found: {directory}")
    out = {}
    for cat in CATEGORIES:
        for suffix in EMBEDDING_SUFFIXES:
            path = directory / f"{cat}{suffix}"
            if path.exists():
                out[cat] = read_embedding_file(path)
                break
    if not out:
        raise InputError(f"no category embedding files in {directory}")
    return out


def embedding_files(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix in EMBEDDING_SUFFIXES and p.stem in CATEGORIES)


# -- atomic writes ---------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def write_csv(path: str | Path, frame: pd.DataFrame) -> None:
    atomic_write_bytes(path, frame.to_csv(index=False, lineterminator="\n").encode("utf-8"))


# -- hashing and manifests -----------------------------------------------------


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for p in sorted(path.iterdir()):
            if p.is_file():
                h.update(p.name.encode())
                h.update(file_sha256(p).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(_clean(config), sort_keys=True).encode()).hexdigest()


def make_manifest(
    command: str,
    config: dict,
    inputs: dict[str, str | Path],
    outputs: list[str],
    seed: int,
    args: dict | None = None,
) -> dict:
    return {
        "command": command,
        "args": dict(args or {}),
        "version": __version__,
        "seed": int(seed),
        "config": config,
        "config_hash": config_hash(config),
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in sorted(inputs.items()) if v},
        "outputs": sorted(outputs),
    }


def check_manifest(path: str | Path) -> list[str]:
    """Input files whose hash no longer matches the manifest (empty if fresh)."""
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    stale = []
    for name, rec in manifest.get("inputs", {}).items():
        p = Path(rec["path"])
        if not p.exists() or file_sha256(p) != rec["sha256"]:
            stale.append(name)
    return stale


# -- run configuration -----------------------------------------------------------


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(",", " ").split())
    if isinstance(value, int):
        return (value,)
    return tuple(int(v) for v in value)


@dataclass
class RunConfig:
    firms: str | None = None
    prices: str | None = None
    calendar: str | None = None
    embeddings: str | None = None
    agent_labels: str | None = None
    sources: str | None = None
    source: str | None = None
    target: str | None = None
    dim: int = 128
    kappa: float = 50.0
    tau: float = 0.99
    lookback: int = 12
    variant: str = "neutralized"
    scheme: str = "text"
    shuffle_peers: bool = False
    cost_bp: float = 2.0
    threshold: float = 0.03
    k: tuple[int, ...] = (10, 20, 30, 60)
    null_draws: int = 200
    bootstrap_draws: int = 2000
    min_confidence: float = 0.0
    window_years: float | None = None  # event Sharpe annualization; None: first-to-last event span
    seed: int = 0
    out: str = "out"
    threads: int = 1

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"dim": int, "lookback": int, "null_draws": int, "bootstrap_draws": int, "seed": int, "threads": int}
        hints.update({"kappa": float, "tau": float, "cost_bp": float, "threshold": float, "min_confidence": float, "window_years": float})
        return hints

    def update(self, values: dict) -> RunConfig:
        """Apply overrides, ignoring ``None``; unknown keys are an error."""
        names = {f.name for f in dataclasses.fields(self)}
        types = self.field_types()
        for key, value in values.items():
            key = key.replace("-", "_")
            if value is None:
                continue
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            if key == "k":
                value = _ints(value)
            elif key == "shuffle_peers":
                value = value if isinstance(value, bool) else str(value).strip().lower() in {"1", "true", "yes", "on"}
            elif key in types:
                value = types[key](value)
            setattr(self, key, value)
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        """Read the ``[run]`` section of an INI-style key = value file.

        Relative input paths are resolved against the config file's directory.
        """
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        if not parser.has_section("run"):
            raise ValueError(f"{path}: missing [run] section")
        values = dict(parser.items("run"))
        for key in ("firms", "prices", "calendar", "embeddings", "agent_labels", "sources", "out"):
            if key in values and values[key] and not Path(values[key]).is_absolute():
                values[key] = str((path.parent / values[key]).resolve())
        return cls().update(values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["k"] = list(self.k)
        return d

    def report_dict(self) -> dict:
        """Config echoed into report files: everything except where and how
        fast the run executed, so reports are byte-identical across both."""
        d = self.to_dict()
        for key in EXECUTION_KEYS:
            d.pop(key)
        return d

    def resolved(self, *keys: str) -> dict:
        """Subset of the config that determines a command's outputs."""
        d = self.to_dict()
        return {k: d[k] for k in keys}


def require(paths: dict[str, str | None]) -> None:
    """Fail fast, naming the first missing input."""
    for name, p in paths.items():
        if not p:
            raise InputError(f"missing required input: {name} (no path configured)")
        if not Path(p).exists():
            raise InputError(f"missing required input: {name} ({p})")


@dataclass
class FactorExport:
    """Long-form factor table (month, firm_id, raw, neutralized[, strict])."""

    frame: pd.DataFrame = field(default_factory=pd.DataFrame)

    @classmethod
    def from_panels(cls, panels) -> FactorExport:
        out = None
        for fp in panels:
            long = fp.to_long()
            out = long if out is None else out.merge(long, on=["month", "firm_id"], how="outer")
        out = out.sort_values(["month", "firm_id"], kind="mergesort").reset_index(drop=True)
        return cls(out)

    def panel_values(self, column: str) -> pd.DataFrame:
        wide = self.frame.pivot(index="month", columns="firm_id", values=column)
        wide.index = pd.PeriodIndex(wide.index, freq="M")
        return wide

    @classmethod
    def read(cls, path: str | Path) -> FactorExport:
        return cls(pd.read_csv(path, dtype={"firm_id": str, "month": str}))
