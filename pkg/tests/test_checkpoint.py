import pytest
import torch

from fkee import checkpoint
from fkee.bridge import BridgeModel
from fkee.errors import CheckpointVersionError, ConfigError
from fkee.fkpde import SolutionNet, estimate_expectation
from fkee.sdesim import TimeGrid


def test_bridge_roundtrip_is_bit_exact(tmp_path):
    m = BridgeModel.create(3, TimeGrid(0.0, 0.025, 8), hidden=(5, 4), seed=11, x0=[0.1, 1 / 3, -2.5])
    path = tmp_path / "bridge.ckpt"
    checkpoint.save(m, path)
    back = checkpoint.load(path)
    for a, b in zip(m.parameters(), back.parameters()):
        assert torch.equal(a, b)
    assert back.grid == m.grid and back.floor == m.floor
    assert back.drift_spec == m.drift_spec
    assert path.read_text().splitlines()[0] == "fkee-ckpt-v1"


def test_solution_roundtrip_keeps_estimate(tmp_path):
    u = SolutionNet.create(2, width=9, seed=4)
    with torch.no_grad():
        u.params.mul_(torch.pi)
    path = tmp_path / "u.ckpt"
    checkpoint.save(u, path)
    v = checkpoint.load(path)
    assert torch.equal(u.params, v.params)
    assert estimate_expectation(u, [0.3, -0.7], 0.2) == estimate_expectation(v, [0.3, -0.7], 0.2)


def test_version_is_enforced():
    text = checkpoint.dumps(SolutionNet.create(1, width=3, seed=0))
    with pytest.raises(CheckpointVersionError):
        checkpoint.loads(text.replace("fkee-ckpt-v1", "fkee-ckpt-v2", 1))
    with pytest.raises(CheckpointVersionError):
        checkpoint.loads("garbage\n" + text)
    with pytest.raises(CheckpointVersionError):
        checkpoint.loads("")


def test_truncated_file_is_rejected():
    text = checkpoint.dumps(BridgeModel.create(1, TimeGrid(0, 0.1, 2), hidden=(3,), seed=0))
    lines = text.splitlines()
    with pytest.raises(ConfigError):
        checkpoint.loads("\n".join(lines[:-1]))
    with pytest.raises(ConfigError):
        checkpoint.loads("\n".join(l for l in lines if not l.startswith("h ")))
    with pytest.raises(ConfigError):
        checkpoint.dumps(object())
