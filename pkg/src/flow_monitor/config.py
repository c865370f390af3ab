"""Configuration management for flow-monitor."""

import copy
import os
from pathlib import Path
from typing import Any, Optional

import yaml
from dotenv import load_dotenv

CONFIG_ENV = "FLOW_MONITOR_CONFIG"
LOG_LEVEL_ENV = "FLOW_MONITOR_LOG_LEVEL"

DEFAULTS: dict[str, Any] = {
    "scenario": {
        "path": None,
        "rho": 0.99,
        "procs_per_component": 10,
        "components": ["ARBC", "EVC", "HRBC", "RTM"],
        "permutation_seed": 0,
    },
    "discovery": {
        "algorithm": "dfg_net",
        "variant_coverage": 0.75,
        "min_edge_frequency": 0.0,
    },
    "conformance": {
        "window_length": 15,
        "node_cap": 1_000_000,
        "heuristic": True,
        "binary": False,
    },
    "analysis": {
        "algorithm": "kmeans",
        "n_clusters": 50,
        "seed": 0,
        "normalize": False,
        "dbscan": {"eps": 1.5, "min_samples": 3},
    },
    "monitor": {
        "host": "127.0.0.1",
        "port": 7878,
        "idle_timeout": 30.0,
        "net": "model.pnml",
        "cluster_model": "clusters.json",
        "verdicts": "-",
    },
    "logging": {"level": "INFO"},
}


def load_yaml(path: Path) -> dict:
    """Read a YAML (or JSON) mapping; an empty file yields an empty dict."""
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class Config:
    """Application configuration."""

    def __init__(self, config_path: Optional[Path] = None):
        load_dotenv()
        self.config_path = config_path or self._default_config_path()
        self._config = self._load_config()

    def _default_config_path(self) -> Path:
        env_path = os.environ.get(CONFIG_ENV)
        if env_path:
            return Path(env_path)
        return Path.cwd() / "config.yaml"

    def _load_config(self) -> dict:
        if not self.config_path.exists():
            return copy.deepcopy(DEFAULTS)
        return _merge(DEFAULTS, load_yaml(self.config_path))

    def get(self, key: str, default: Any = None) -> Any:
        keys = key.split(".")
        value: Any = self._config
        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
            else:
                return default
            if value is None:
                return default
        return value

    @property
    def scenario_path(self) -> Optional[Path]:
        path = self.get("scenario.path")
        return Path(path) if path else None

    @property
    def rho(self) -> float:
        return float(self.get("scenario.rho", 0.99))

    @property
    def procs_per_component(self) -> int:
        return int(self.get("scenario.procs_per_component", 10))

    @property
    def components(self) -> list[str]:
        return list(self.get("scenario.components", DEFAULTS["scenario"]["components"]))

    @property
    def permutation_seed(self) -> int:
        return int(self.get("scenario.permutation_seed", 0))

    @property
    def discovery_algorithm(self) -> str:
        return self.get("discovery.algorithm", "dfg_net")

    @property
    def variant_coverage(self) -> float:
        return float(self.get("discovery.variant_coverage", 0.75))

    @property
    def min_edge_frequency(self) -> float:
        return float(self.get("discovery.min_edge_frequency", 0.0))

    @property
    def window_length(self) -> int:
        return int(self.get("conformance.window_length", 15))

    @property
    def node_cap(self) -> int:
        return int(self.get("conformance.node_cap", 1_000_000))

    @property
    def use_heuristic(self) -> bool:
        return bool(self.get("conformance.heuristic", True))

    @property
    def binary_diagnosis(self) -> bool:
        return bool(self.get("conformance.binary", False))

    @property
    def cluster_algorithm(self) -> str:
        return self.get("analysis.algorithm", "kmeans")

    @property
    def n_clusters(self) -> int:
        return int(self.get("analysis.n_clusters", 50))

    @property
    def cluster_seed(self) -> int:
        return int(self.get("analysis.seed", 0))

    @property
    def normalize(self) -> bool:
        return bool(self.get("analysis.normalize", False))

    @property
    def dbscan_eps(self) -> float:
        return float(self.get("analysis.dbscan.eps", 1.5))

    @property
    def dbscan_min_samples(self) -> int:
        return int(self.get("analysis.dbscan.min_samples", 3))

    @property
    def monitor_host(self) -> str:
        return self.get("monitor.host", "127.0.0.1")

    @property
    def monitor_port(self) -> int:
        return int(self.get("monitor.port", 7878))

    @property
    def idle_timeout(self) -> float:
        return float(self.get("monitor.idle_timeout", 30.0))

    @property
    def monitor_net(self) -> Path:
        return Path(self.get("monitor.net", "model.pnml"))

    @property
    def monitor_cluster_model(self) -> Path:
        return Path(self.get("monitor.cluster_model", "clusters.json"))

    @property
    def verdict_sink(self) -> str:
        return self.get("monitor.verdicts", "-")

    @property
    def log_level(self) -> str:
        return os.environ.get(LOG_LEVEL_ENV) or self.get("logging.level", "INFO")


_config: Optional[Config] = None


def get_config(config_path: Optional[Path] = None) -> Config:
    global _config
    if _config is None:
        _config = Config(config_path)
    return _config


def reset_config() -> None:
    global _config
    _config = None
