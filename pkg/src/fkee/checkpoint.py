"""Plain-text checkpoints for bridge models and solution networks.

Layout: a version line, a ``kind`` line, then ``[section name]`` blocks of
``key value`` lines.  Parameter arrays are written one number per line with 17
significant digits, which round-trips float64 exactly.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Union

import torch

from .bridge import BridgeModel
from .errors import CheckpointVersionError, ConfigError
from .fkpde import SolutionNet
from .gradengine import DTYPE, MLPSpec
from .sdesim import TimeGrid

VERSION = "fkee-ckpt-v1"


def _num(v: float) -> str:
    return format(float(v), ".17g")


def _mlp_block(name: str, spec: MLPSpec, params: torch.Tensor) -> List[str]:
    flat = params.detach().reshape(-1).tolist()
    lines = [f"[mlp {name}]", f"input_dim {spec.input_dim}",
             "hidden " + " ".join(str(w) for w in spec.hidden_layers),
             f"output_dim {spec.output_dim}", f"activation {spec.activation}", f"params {len(flat)}"]
    return lines + [_num(v) for v in flat]


def dumps(obj: Union[BridgeModel, SolutionNet]) -> str:
    if isinstance(obj, BridgeModel):
        lines = [VERSION, "kind bridge"]
        lines += _mlp_block("drift", obj.drift_spec, obj.drift_params)
        lines += _mlp_block("diffusion", obj.diffusion_spec, obj.diffusion_params)
        g = obj.grid
        lines += ["[grid]", f"t0 {_num(g.t0)}", f"h {_num(g.h)}", f"M {g.M}", f"floor {_num(obj.floor)}"]
        x0 = obj.x0.detach().tolist()
        lines += ["[x0]", f"dim {len(x0)}"] + [_num(v) for v in x0]
    elif isinstance(obj, SolutionNet):
        lines = [VERSION, "kind solution"] + _mlp_block("u", obj.spec, obj.params)
    else:
        raise ConfigError(f"cannot checkpoint a {type(obj).__name__}")
    return "\n".join(lines) + "\n"


def _sections(lines: List[str]) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {}
    current = None
    for ln in lines:
        if ln.startswith("[") and ln.endswith("]"):
            current = ln[1:-1]
            if current in out:
                raise ConfigError(f"duplicate section [{current}]")
            out[current] = []
        elif current is None:
            raise ConfigError(f"line outside any section: {ln!r}")
        else:
            out[current].append(ln)
    return out


def _kv(body: List[str], keys: List[str]) -> Dict[str, str]:
    kv = {}
    for ln, key in zip(body, keys):
        k, _, v = ln.partition(" ")
        if k != key:
            raise ConfigError(f"expected {key!r}, found {ln!r}")
        kv[k] = v
    if len(kv) != len(keys):
        raise ConfigError(f"section truncated; expected keys {keys}")
    return kv


def _read_mlp(body: List[str]):
    head = ["input_dim", "hidden", "output_dim", "activation", "params"]
    kv = _kv(body, head)
    spec = MLPSpec(int(kv["input_dim"]), tuple(int(w) for w in kv["hidden"].split()),
                   int(kv["output_dim"]), kv["activation"])
    values = body[len(head):]
    if len(values) != int(kv["params"]) or len(values) != spec.n_params:
        raise ConfigError(f"expected {spec.n_params} parameters, found {len(values)}")
    return spec, torch.tensor([float(v) for v in values], dtype=DTYPE)


def loads(text: str) -> Union[BridgeModel, SolutionNet]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != VERSION:
        found = lines[0][:40] if lines else "<empty>"
        raise CheckpointVersionError(f"expected version tag {VERSION!r}, found {found!r}")
    if len(lines) < 2 or not lines[1].startswith("kind "):
        raise ConfigError("missing kind line")
    kind = lines[1][5:]
    sec = _sections(lines[2:])
    # everything is parsed before any object is built, so a bad file loads nothing
    if kind == "solution":
        spec, params = _read_mlp(sec.get("mlp u", []))
        return SolutionNet(spec, params)
    if kind == "bridge":
        dspec, dparams = _read_mlp(sec.get("mlp drift", []))
        sspec, sparams = _read_mlp(sec.get("mlp diffusion", []))
        g = _kv(sec.get("grid", []), ["t0", "h", "M", "floor"])
        body = sec.get("x0", [])
        dim = int(_kv(body[:1], ["dim"])["dim"])
        if len(body) != dim + 1:
            raise ConfigError("x0 section truncated")
        x0 = torch.tensor([float(v) for v in body[1:]], dtype=DTYPE)
        grid = TimeGrid(float(g["t0"]), float(g["h"]), int(g["M"]))
        return BridgeModel(dspec, dparams, sspec, sparams, x0, grid, float(g["floor"]))
    raise ConfigError(f"unknown checkpoint kind {kind!r}")


def save(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def load(path):
    return loads(Path(path).read_text())
