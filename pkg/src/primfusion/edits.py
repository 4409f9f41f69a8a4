"""Edit scripts: plain-text lists of delete / transform commands.

::

    delete <plane_id>
    transform <plane_id> <16 row-major values>
    transform_region <min x y z> <max x y z> <16 row-major values>

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .registry import Registry
from .volume import EditState, SemanticVolume, delete_primitive, transform_primitive, transform_region


class EditScriptError(ValueError):
    pass


@dataclass(frozen=True)
class EditCommand:
    op: str  # delete | transform | transform_region
    plane_id: int = 0
    matrix: Optional[np.ndarray] = None
    aabb_min: Optional[np.ndarray] = None
    aabb_max: Optional[np.ndarray] = None
    line: int = 0


def _matrix(values: list[str], where: str) -> np.ndarray:
    try:
        m = np.array([float(v) for v in values]).reshape(4, 4)
    except ValueError as exc:
        raise EditScriptError(f"{where}: bad matrix value ({exc})") from None
    R = m[:3, :3]
    if (not np.allclose(m[3], [0, 0, 0, 1], atol=1e-6) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6)
            or abs(np.linalg.det(R) - 1.0) > 1e-6):
        raise EditScriptError(f"{where}: transform is not rigid within 1e-6")
    return m


def _plane_id(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise EditScriptError(f"{where}: plane id must be an integer, got {value!r}") from None


def _floats(values: list[str], where: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in values])
    except ValueError as exc:
        raise EditScriptError(f"{where}: bad number ({exc})") from None


def parse_edit_script(text: str, source: str = "<edit>") -> list[EditCommand]:
    cmds = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op, args = parts[0], parts[1:]
        where = f"{source}:{n}"
        if op == "delete":
            if len(args) != 1:
                raise EditScriptError(f"{where}: usage 'delete <plane_id>'")
            cmds.append(EditCommand("delete", plane_id=_plane_id(args[0], where), line=n))
        elif op == "transform":
            if len(args) != 17:
                raise EditScriptError(f"{where}: usage 'transform <plane_id> <16 values>'")
            cmds.append(EditCommand("transform", plane_id=_plane_id(args[0], where),
                                    matrix=_matrix(args[1:], where), line=n))
        elif op == "transform_region":
            if len(args) != 22:
                raise EditScriptError(f"{where}: usage 'transform_region <min xyz> <max xyz> <16 values>'")
            lo = _floats(args[:3], where)
            hi = _floats(args[3:6], where)
            if np.any(hi < lo):
                raise EditScriptError(f"{where}: aabb max below min")
            cmds.append(EditCommand("transform_region", matrix=_matrix(args[6:], where),
                                    aabb_min=lo, aabb_max=hi, line=n))
        else:
            raise EditScriptError(f"{where}: unknown command {op!r}")
    return cmds


def load_edit_script(path) -> list[EditCommand]:
    return parse_edit_script(Path(path).read_text(), str(path))


def format_matrix(m) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(m, dtype=np.float64).reshape(-1))


def apply_edit_script(cmds: list[EditCommand], vol: SemanticVolume, registry: Registry,
                      edit: Optional[EditState] = None) -> EditState:
    """Apply commands in order, mutating ``vol`` and ``registry``; returns the edit state."""
    edit = edit if edit is not None else EditState.for_volume(vol)
    for c in cmds:
        if c.op in ("delete", "transform") and c.plane_id not in registry:
            raise EditScriptError(f"line {c.line}: unknown plane id {c.plane_id}")
        if c.op == "delete":
            delete_primitive(vol, c.plane_id, registry)
        elif c.op == "transform":
            transform_primitive(vol, edit, c.plane_id, c.matrix)
        else:
            transform_region(vol, edit, c.aabb_min, c.aabb_max, c.matrix)
    return edit
