"""Adapter checkpoints: a JSON envelope plus one CSV file per factor."""

from __future__ import annotations

import json
from pathlib import Path

from .adapters import AbbaAdapter, AbbaChain, HiraAdapter, LoraAdapter, ScaleMode
from .errors import FormatError, ShapeError
from .linalg import read_matrix_csv, write_matrix_csv

SCHEMA_VERSION = 1
ENVELOPE = "adapter.json"


def _factors(ad) -> tuple[str, dict]:
    if isinstance(ad, AbbaAdapter):
        return "abba", {"b1": ad.b1, "a1": ad.a1, "b2": ad.b2, "a2": ad.a2}
    if isinstance(ad, LoraAdapter):
        return "lora", {"b": ad.b, "a": ad.a}
    if isinstance(ad, HiraAdapter):
        return "hira", {"b": ad.b, "a": ad.a}
    if isinstance(ad, AbbaChain):
        out = {}
        for i, (b, a) in enumerate(ad.pairs, start=1):
            out[f"b{i}"] = b
            out[f"a{i}"] = a
        return "abba_chain", out
    raise TypeError(f"cannot checkpoint {type(ad).__name__}")


def save_adapter(directory, ad) -> Path:
    """Write ``adapter.json`` and the factor CSVs into ``directory``.

    A HiRA checkpoint stores only its trainable factors; the base weight is
    supplied again when loading.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind, factors = _factors(ad)
    envelope = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "alpha": ad.alpha,
        "ranks": [int(f.shape[1]) for name, f in factors.items() if name.startswith("b")],
        "shapes": {name: list(f.shape) for name, f in factors.items()},
    }
    if kind == "lora":
        envelope["scale_mode"] = ad.scale_mode.value
    for name, f in factors.items():
        write_matrix_csv(directory / f"{name}.csv", f)
    path = directory / ENVELOPE
    path.write_text(json.dumps(envelope, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_adapter(directory, w0=None):
    directory = Path(directory)
    try:
        envelope = json.loads((directory / ENVELOPE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory / ENVELOPE}: malformed JSON ({exc.msg} at position {exc.pos})") from exc
    if envelope.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported checkpoint schema_version {envelope.get('schema_version')!r}")
    kind = envelope.get("kind")
    shapes = envelope.get("shapes", {})
    factors = {}
    for name, shape in shapes.items():
        f = read_matrix_csv(directory / f"{name}.csv")
        if list(f.shape) != list(shape):
            raise FormatError(f"{name}.csv is {f.shape} but the envelope says {tuple(shape)}")
        factors[name] = f
    alpha = envelope["alpha"]
    if kind == "abba":
        return AbbaAdapter(factors["b1"], factors["a1"], factors["b2"], factors["a2"], alpha)
    if kind == "lora":
        return LoraAdapter(factors["b"], factors["a"], alpha, ScaleMode(envelope.get("scale_mode", "standard")))
    if kind == "hira":
        if w0 is None:
            raise ShapeError("a HiRA checkpoint needs the base weight to load")
        return HiraAdapter(w0, factors["b"], factors["a"], alpha)
    if kind == "abba_chain":
        k = len(envelope["ranks"])
        return AbbaChain([(factors[f"b{i}"], factors[f"a{i}"]) for i in range(1, k + 1)], alpha)
    raise FormatError(f"unknown adapter kind {kind!r}")
