import os
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logging.basicConfig(
    level=os.getenv("HEATCTRL_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class Config:
    """Configuration centralisée du solveur"""
    # Algèbre linéaire
    CG_TOL = float(os.getenv("HEATCTRL_CG_TOL", "1e-11"))
    CG_MAX_ITER_FACTOR = 10
    POWER_ITERATIONS = 20
    POWER_SLACK = 1.05
    POWER_SEED = 20240611

    # Quadratures
    TIME_GAUSS_POINTS = 2
    ERROR_TIME_GAUSS_POINTS = 3

    # Optimiseur
    CONTROL_MAX_ITERS = 500
    CONTROL_TOL_FACTOR = 1e-8
    DEFAULT_ALPHA = 0.1
    DEFAULT_BOUNDS = (-0.5, 0.5)

    # Études de convergence
    SPACE_LEVELS = [4, 8, 16, 32]
    SPACE_REFERENCE = 64
    SPACE_FIXED_M = 512
    TIME_LEVELS = [8, 16, 32, 64]
    TIME_REFERENCE = 1024
    TIME_FIXED_N = 32
    # contrôle: chaque niveau coûte une résolution itérative complète
    CONTROL_SPACE_LEVELS = [4, 8, 16]
    CONTROL_SPACE_REFERENCE = 32
    CONTROL_SPACE_FIXED_M = 64
    CONTROL_TIME_LEVELS = [4, 8, 16]
    CONTROL_TIME_REFERENCE = 64
    CONTROL_TIME_FIXED_N = 8
    DEFAULT_T = 1.0
    UNRELIABLE_FACTOR = 4

    VERSION = "0.1.0"


class HeatCtrlError(Exception):
    """Base des erreurs du solveur"""


class ConfigError(HeatCtrlError, ValueError):
    """Clé de configuration absente ou mal typée; le message nomme la clé"""

    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key


_MISSING = object()


class RunConfig:
    """Configuration d'exécution lue depuis un fichier TOML (clés pointées: `control.alpha`)"""

    def __init__(self, raw: dict, source=None):
        self.raw = raw
        self.source = source

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as handle:
                raw = tomllib.load(handle)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(path), f"TOML invalide ({e})") from e
        logger.debug(f"Configuration chargée depuis {path}")
        return cls(raw, source=str(path))

    def _lookup(self, key: str):
        node = self.raw
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return _MISSING
            node = node[part]
        return node

    def has(self, key: str) -> bool:
        return self._lookup(key) is not _MISSING

    def get(self, key: str, kind: type, default=_MISSING):
        value = self._lookup(key)
        if value is _MISSING:
            if default is _MISSING:
                raise ConfigError(key, "clé manquante")
            return default
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is str and isinstance(value, str):
            return value
        raise ConfigError(key, f"{kind.__name__} attendu, reçu {value!r}")

    def get_list(self, key: str, kind: type, length: int = None, default=_MISSING) -> list:
        value = self._lookup(key)
        if value is _MISSING:
            if default is _MISSING:
                raise ConfigError(key, "clé manquante")
            return default
        if not isinstance(value, list) or (length is not None and len(value) != length):
            raise ConfigError(key, f"liste{f' de {length} éléments' if length else ''} attendue, reçu {value!r}")
        scratch = RunConfig({"v": None})
        out = []
        for item in value:
            scratch.raw["v"] = item
            try:
                out.append(scratch.get("v", kind))
            except ConfigError:
                raise ConfigError(key, f"élément {item!r} invalide ({kind.__name__} attendu)") from None
        return out
