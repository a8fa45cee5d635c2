"""Binary checkpoints: ``FGCK`` magic, u32 version, JSON shape table, little-endian f64 payload.

Layout::

    b"FGCK" | u32 version | u32 header length | header (UTF-8 JSON) | payload

The header lists every block as ``[name, length]`` in payload order together
with the layer sizes of each network, the Adam step counters, the config echo
and the global step. The JSON is written with sorted keys so saving the same
bundle twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import CheckpointError
from .nn import param_count
from .sac import Agent, SacHyper

MAGIC = b"FGCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class AgentBundle:
    agent_id: int
    obs_dim: int
    act_dim: int
    sizes: dict[str, list[int]]
    blocks: dict[str, np.ndarray]
    adam_steps: dict[str, int]

    @classmethod
    def from_agent(cls, ag: Agent) -> "AgentBundle":
        nets = {"policy": ag.policy, "critic0": ag.critics[0], "critic1": ag.critics[1],
                "target0": ag.targets[0], "target1": ag.targets[1]}
        opts = {"policy_opt": ag.policy_opt, "critic_opt0": ag.critic_opts[0], "critic_opt1": ag.critic_opts[1]}
        blocks = {k: n.flat.copy() for k, n in nets.items()}
        for k, opt in opts.items():
            blocks[f"{k}.m"] = opt.m.copy()
            blocks[f"{k}.v"] = opt.v.copy()
        return cls(ag.id, ag.obs_dim, ag.act_dim, {k: list(n.sizes) for k, n in nets.items()},
                   blocks, {k: opt.t for k, opt in opts.items()})

    def restore(self, ag: Agent) -> None:
        """Copy parameters and optimizer state into a freshly built agent of matching shape."""
        nets = {"policy": ag.policy, "critic0": ag.critics[0], "critic1": ag.critics[1],
                "target0": ag.targets[0], "target1": ag.targets[1]}
        for k, net in nets.items():
            if list(net.sizes) != self.sizes.get(k):
                raise CheckpointError(f"agent {self.agent_id} {k}: checkpoint sizes {self.sizes.get(k)} "
                                      f"do not match {list(net.sizes)}")
        for k, net in nets.items():
            net.assign(self.blocks[k])
        opts = {"policy_opt": ag.policy_opt, "critic_opt0": ag.critic_opts[0], "critic_opt1": ag.critic_opts[1]}
        for k, opt in opts.items():
            opt.m[:] = self.blocks[f"{k}.m"]
            opt.v[:] = self.blocks[f"{k}.v"]
            opt.t = self.adam_steps[k]


@dataclass
class Checkpoint:
    agents: list[AgentBundle]
    global_step: int = 0
    config: dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def capture(cls, agents: Sequence[Agent], global_step: int, config: dict[str, Any]) -> "Checkpoint":
        return cls([AgentBundle.from_agent(a) for a in agents], global_step, config)

    def build_agents(self, hyper: SacHyper | None = None) -> list[Agent]:
        if hyper is None:
            hyper = SacHyper(**self.config.get("hyper", {}))
        agents = []
        for b in self.agents:
            ag = Agent(b.agent_id, b.obs_dim, b.act_dim, hyper, seed=0)
            b.restore(ag)
            agents.append(ag)
        return agents


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    table, arrays = [], []
    agents_meta = []
    for b in ckpt.agents:
        names = sorted(b.blocks)
        for name in names:
            arr = np.ascontiguousarray(b.blocks[name], dtype="<f8").ravel()
            table.append([f"{b.agent_id}/{name}", int(arr.size)])
            arrays.append(arr)
        agents_meta.append({"id": b.agent_id, "obs_dim": b.obs_dim, "act_dim": b.act_dim,
                            "sizes": b.sizes, "adam_steps": b.adam_steps})
    header = json.dumps(
        {"agents": agents_meta, "blocks": table, "global_step": ckpt.global_step, "config": ckpt.config},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    payload = np.concatenate(arrays).astype("<f8").tobytes() if arrays else b""
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    total = sum(n for _, n in header["blocks"])
    if len(raw) - start != 8 * total:
        raise CheckpointError(f"{path}: payload holds {len(raw) - start} bytes, header expects {8 * total}")
    payload = np.frombuffer(raw, dtype="<f8", offset=start).astype(float)
    blocks: dict[int, dict[str, np.ndarray]] = {}
    pos = 0
    for name, n in header["blocks"]:
        aid, key = name.split("/", 1)
        blocks.setdefault(int(aid), {})[key] = payload[pos:pos + n].copy()
        pos += n
    bundles = []
    for meta in header["agents"]:
        b = AgentBundle(meta["id"], meta["obs_dim"], meta["act_dim"], meta["sizes"],
                        blocks.get(meta["id"], {}), meta["adam_steps"])
        for k, sizes in b.sizes.items():
            if k not in b.blocks or b.blocks[k].size != param_count(sizes):
                raise CheckpointError(f"{path}: agent {b.agent_id} block {k} does not match sizes {sizes}")
        bundles.append(b)
    return Checkpoint(bundles, header["global_step"], header["config"], version)
