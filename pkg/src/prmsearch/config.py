"""Run configuration: one YAML file, environment overrides, then command-line flags."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .core import ActionKind
from .errors import ConfigError
from .gateway.mock import ScriptedActor, ScriptedRewardModel
from .gateway.remote import ChatClient, EndpointConfig, RemoteActor, RemoteRewardModel
from .inference import BonConfig, Strategy
from .mcts import SearchConfig

ENV_PREFIX = "PRMSEARCH__"

DEFAULTS: dict[str, Any] = {
    "seed": None,
    "workers": 4,
    "paths": {},
    "endpoints": {
        "actors": [{"type": "mock", "id": "actor-0", "seed": 0},
                   {"type": "mock", "id": "actor-1", "seed": 1},
                   {"type": "mock", "id": "actor-2", "seed": 2}],
        "prm": {"type": "mock", "id": "prm", "seed": 0},
    },
    "search": {},
    "bon": {"n_values": [1, 2, 4, 8], "strategies": ["random", "self_consistency", "prm_accumulated"],
            "temperature_low": 1.1, "temperature_high": 1.3, "accumulate": "sum"},
    "selection": {"top_fraction": 0.5, "total": 160000},
    "datagen": {"confidence_floor": 0.6, "max_error_share": 0.4, "injections_per_reference": 1},
}


def deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(d: dict, dotted: str, raw: str):
    """Assign a YAML-parsed scalar to ``a.b.c`` inside ``d``."""
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = yaml.safe_load(raw)


def env_overrides(environ: Mapping[str, str] = os.environ) -> dict:
    """``PRMSEARCH__search__tau=0.4`` becomes ``{"search": {"tau": 0.4}}``; ``PRMSEARCH_SEED`` sets the seed."""
    out: dict = {}
    for name, value in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            set_dotted(out, name[len(ENV_PREFIX):].replace("__", ".").lower(), value)
    if "PRMSEARCH_SEED" in environ:
        out["seed"] = int(environ["PRMSEARCH_SEED"])
    return out


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[list[str]] = None,
             environ: Mapping[str, str] = os.environ) -> "RunConfig":
        data = copy.deepcopy(DEFAULTS)
        base = Path.cwd()
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError("config file not found", p)
            with open(p, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
            if not isinstance(loaded, dict):
                raise ConfigError("config file must hold a mapping", p)
            data = deep_merge(data, loaded)
            base = p.resolve().parent
        data = deep_merge(data, env_overrides(environ))
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            set_dotted(data, k.strip(), v)
        return cls(data, base)

    # -- accessors --------------------------------------------------------
    @property
    def seed(self) -> Optional[int]:
        return self.data.get("seed")

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required for runs that write datasets")
        return int(self.seed)

    @property
    def workers(self) -> int:
        return max(1, int(self.data.get("workers") or 1))

    def path(self, name: str, must_exist: bool = False, required: bool = True) -> Optional[Path]:
        raw = self.data.get("paths", {}).get(name)
        if raw is None:
            if required:
                raise ConfigError(f"paths.{name} is not configured")
            return None
        p = Path(raw)
        if not p.is_absolute():
            p = self.base_dir / p
        if must_exist and not p.exists():
            raise ConfigError(f"paths.{name} does not exist", p)
        return p

    def search_config(self) -> SearchConfig:
        opts = dict(self.data.get("search") or {})
        opts.setdefault("seed", self.seed or 0)
        return SearchConfig(**opts)

    def bon_configs(self) -> list[BonConfig]:
        b = self.data["bon"]
        return [BonConfig(n=int(n), strategy=Strategy(s), temperature_low=b["temperature_low"],
                          temperature_high=b["temperature_high"], seed=self.seed or 0,
                          accumulate=b.get("accumulate", "sum"))
                for s in b["strategies"] for n in b["n_values"]]

    # -- model construction ---------------------------------------------
    def _load_script(self, spec: Mapping) -> Mapping:
        if "script_file" not in spec:
            return spec
        p = Path(spec["script_file"])
        p = p if p.is_absolute() else self.base_dir / p
        if not p.is_file():
            raise ConfigError("mock script file not found", p)
        with open(p, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) if p.suffix in (".yaml", ".yml") else json.load(fh)
        return {**loaded, **{k: v for k, v in spec.items() if k != "script_file"}}

    def _client(self, spec: Mapping) -> ChatClient:
        if "base_url" not in spec or "model" not in spec:
            raise ConfigError(f"remote endpoint {spec.get('id')!r} needs base_url and model")
        return ChatClient(EndpointConfig.from_dict(spec))

    def build_actor(self, spec: Mapping):
        spec = self._load_script(spec)
        kind = spec.get("type", "mock")
        if kind == "remote":
            return RemoteActor(spec["id"], self._client(spec))
        if kind != "mock":
            raise ConfigError(f"unknown endpoint type {kind!r}")
        script = {}
        for entry in spec.get("script", ()):
            key = (entry.get("problem_id"), ActionKind(entry["action"]), entry.get("prefix_hash"))
            script[key] = _outcomes(entry["outcomes"])
        solutions = {pid: _outcomes(v) for pid, v in (spec.get("solutions") or {}).items()}
        return ScriptedActor(spec["id"], seed=int(spec.get("seed", 0)), script=script, solutions=solutions,
                             default_branching=int(spec.get("default_branching", 2)))

    def build_reward_model(self, spec: Mapping):
        spec = self._load_script(spec)
        kind = spec.get("type", "mock")
        if kind == "remote":
            return RemoteRewardModel(spec["id"], self._client(spec))
        if kind != "mock":
            raise ConfigError(f"unknown endpoint type {kind!r}")
        script = {}
        for entry in spec.get("script", ()):
            key = (entry["problem_id"], entry["content"]) if entry.get("problem_id") else entry["content"]
            script[key] = [tuple(o) if isinstance(o, list) else o for o in entry["outcomes"]]
        return ScriptedRewardModel(spec.get("id", "prm"), seed=int(spec.get("seed", 0)), script=script,
                                   default_score=spec.get("default_score"))

    def actors(self):
        specs = self.data["endpoints"].get("actors") or []
        if not specs:
            raise ConfigError("endpoints.actors is empty")
        return [self.build_actor(s) for s in specs]

    def reward_model(self, role: str = "prm"):
        eps = self.data["endpoints"]
        spec = eps.get(role) or eps.get("prm")
        if spec is None:
            raise ConfigError(f"endpoints.{role} is not configured")
        return self.build_reward_model(spec)

    def optional_reward_model(self, role: str):
        spec = self.data["endpoints"].get(role)
        return None if spec is None else self.build_reward_model(spec)

    def optional_actor(self, role: str):
        spec = self.data["endpoints"].get(role)
        return None if spec is None else self.build_actor(spec)


def _outcomes(raw):
    if isinstance(raw, str):
        return raw
    return [(float(w), text) for w, text in raw]
