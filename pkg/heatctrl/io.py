import csv
import json
import logging
import math
import subprocess
from pathlib import Path
from typing import List, Union

import numpy as np

from heatctrl.config import Config
from heatctrl.parabolic import BoundaryField, SpaceTimeField

logger = logging.getLogger(__name__)

FIELD_COLUMNS = ["slab", "node", "t_m", "value"]


def write_field_csv(path, field: Union[SpaceTimeField, BoundaryField]) -> Path:
    """Une ligne par (tranche, noeud); les champs de bord utilisent les numéros globaux des noeuds"""
    path = Path(path)
    nodes = field.mesh.boundary_nodes if field.on_boundary else np.arange(field.mesh.num_nodes)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(FIELD_COLUMNS)
        for m, t_m in enumerate(field.grid.t[1:]):
            for node, value in zip(nodes.tolist(), field.coeffs[m].tolist()):
                writer.writerow([m, node, repr(float(t_m)), repr(value)])
    logger.debug(f"Champ écrit: {path}")
    return path


def read_field_csv(path):
    """Relit un champ écrit par write_field_csv: (noeuds dans l'ordre du fichier, coefficients (M, N))"""
    with Path(path).open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != FIELD_COLUMNS:
            raise ValueError(f"colonnes inattendues dans {path}: {reader.fieldnames}")
        rows = [(int(r["slab"]), int(r["node"]), float(r["value"])) for r in reader]
    slabs = sorted({r[0] for r in rows})
    nodes = [r[1] for r in rows if r[0] == slabs[0]]
    values = np.array([r[2] for r in rows]).reshape(len(slabs), len(nodes))
    return np.array(nodes), values


def write_rows_csv(path, rows: List[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        if rows:
            writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path, payload: dict) -> Path:
    """JSON déterministe (clés triées), NaN remplacés par null"""
    path = Path(path)
    path.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")
    return path


def version() -> str:
    """`git describe` si disponible, sinon la version du paquet"""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"git describe indisponible: {e}")
    return Config.VERSION
