"""Run configuration: one TOML file with every threshold and covariance.

Sections: ``[run]``, ``[scene]`` (with ``[scene.camera]`` and ``[[scene.objects]]``),
``[noise]``, ``[frontend]``, ``[backend]`` and ``[solver]``. Missing keys take
the defaults printed by ``wcslam --dump-defaults``. A ``huber`` of 0 disables
the robust kernel; a ``window`` of 0 means full batch.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backend import BackendConfig, FormulationKind
from .frontend import FrontendConfig
from .graph_solver import SolverConfig
from .scenegen import ConfigError, NoiseSpec, SceneConfig

__all__ = ["RunConfig", "load_config", "dump_defaults", "ConfigError"]


@dataclass
class RunConfig:
    seed: int | None = None
    formulation: str = "wcme"
    window: int | None = None  # None: full batch
    overlap: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("a seed is required ([run] seed or --seed)")
        try:
            FormulationKind(self.formulation)
        except ValueError:
            raise ConfigError(f"unknown formulation {self.formulation!r}") from None
        if self.window is not None and (self.window < 2 or not 0 <= self.overlap < self.window):
            raise ConfigError("need window >= 2 and 0 <= overlap < window")
        self.scene.validate()
        self.noise.validate()

    def with_seed(self, seed: int) -> RunConfig:
        """Copy with the run seed pushed into scene generation and the front end."""
        return replace(
            self,
            seed=seed,
            scene=replace(self.scene, seed=seed),
            frontend=replace(self.frontend, seed=seed),
        )

    def to_dict(self) -> dict:
        backend = asdict(self.backend)
        solver = backend.pop("solver")
        backend["huber"] = backend["huber"] or 0.0
        frontend = asdict(self.frontend)
        return {
            "run": {
                "seed": self.seed if self.seed is not None else 0,
                "formulation": self.formulation,
                "window": self.window or 0,
                "overlap": self.overlap,
            },
            "scene": self.scene.to_dict(),
            "noise": self.noise.to_dict(),
            "frontend": frontend,
            "backend": backend,
            "solver": solver,
        }


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - {"run", "scene", "noise", "frontend", "backend", "solver"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    run = dict(d.get("run", {}))
    extra = set(run) - {"seed", "formulation", "window", "overlap"}
    if extra:
        raise ConfigError(f"[run] unknown keys: {sorted(extra)}")
    try:
        scene = SceneConfig.from_dict(d.get("scene", {}))
    except TypeError as exc:
        raise ConfigError(f"[scene] {exc}") from exc
    noise = NoiseSpec.from_dict(d.get("noise", {}))
    frontend = _build(FrontendConfig, d.get("frontend", {}), "frontend")
    solver = _build(SolverConfig, d.get("solver", {}), "solver")
    backend_d = dict(d.get("backend", {}))
    if "huber" in backend_d and not backend_d["huber"]:
        backend_d["huber"] = None
    if "solver" in backend_d:
        raise ConfigError("solver settings belong in the [solver] section")
    backend = _build(BackendConfig, {**backend_d, "solver": solver}, "backend")
    window = run.get("window", 0)
    cfg = RunConfig(
        seed=run.get("seed"),
        formulation=run.get("formulation", "wcme"),
        window=int(window) if window else None,
        overlap=int(run.get("overlap", 1)),
        scene=scene,
        noise=noise,
        frontend=frontend,
        backend=backend,
    )
    if cfg.seed is not None:
        cfg = cfg.with_seed(int(cfg.seed))
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    """Read a TOML run config; ``seed`` overrides ``[run] seed``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(d)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    cfg.validate()
    return cfg


def dump_defaults() -> str:
    return tomli_w.dumps(RunConfig(seed=0).to_dict())
