"""Deterministic report serialization: 17-significant-digit JSON, atomic writes."""

import json
import os
import tempfile

import numpy as np


def _format_float(x):
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x}")
    s = format(float(x), ".17g")
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


def dumps(obj, indent=0):
    """JSON text with floats rendered to 17 significant digits.

    Unlike json.dumps, the float format is pinned so reports are
    byte-identical across runs and platforms.  Dict keys keep insertion
    order and must be strings.
    """
    pad = " " * indent
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple, np.ndarray)):
        items = [dumps(v, indent) for v in obj]
        return "[" + ", ".join(items) + "]"
    if isinstance(obj, dict):
        parts = []
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"JSON object keys must be strings, got {k!r}")
            parts.append(f"{json.dumps(k)}: {dumps(v, indent)}")
        if indent:
            sep = ",\n" + pad
            return "{\n" + pad + sep.join(parts) + "\n}"
        return "{" + ", ".join(parts) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_atomic(path, text):
    """Write text then rename, so the file never exists half-written."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
