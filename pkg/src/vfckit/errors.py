"""Error type shared by every vfckit module."""

from __future__ import annotations

from typing import Any


class VfckitError(Exception):
    """A failure carrying a stable machine-readable ``code``.

    ``witness`` holds whatever data locates the failure (a sample point, a
    group element index, a line/column pair, ...).
    """

    def __init__(self, code: str, message: str = "", witness: Any = None):
        self.code = code
        self.message = message or code
        self.witness = witness
        super().__init__(f"{code}: {self.message}")

    def to_dict(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.witness is not None:
            out["witness"] = _plain(self.witness)
        return out


def _plain(obj: Any) -> Any:
    try:
        import numpy as np
    except ImportError:  # pragma: no cover
        np = None
    if np is not None and isinstance(obj, np.ndarray):
        return obj.tolist()
    if np is not None and isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
