"""Binary checkpoint format.

Layout (little-endian)::

    b"VSTN"                 magic
    u32                     format version
    u32                     header length in bytes
    header                  UTF-8 JSON: architectures, iteration, config,
                            config digest, optimiser scalars, tensor directory
    float32 payload         tensors in directory order, C order
    u32                     CRC-32 of everything above

The directory lists ``{"name", "shape"}`` entries; offsets follow from the
shapes.  Serialisation is canonical (sorted JSON keys, sorted tensor names)
so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import build_from_config

MAGIC = b"VSTN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    architectures: dict  # role -> network config
    tensors: dict  # name -> float32 array
    iteration: int = 0
    config: dict = field(default_factory=dict)
    config_digest: str = ""
    optimizers: dict = field(default_factory=dict)  # role -> {"t", "beta1", "beta2", "epsilon", "lr"}
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_training(cls, cfg, iteration, nets, opts=None, extra=None):
        tensors, archs, optim = {}, {}, {}
        for role, net in nets.items():
            archs[role] = net.config()
            for name, p in net.named_parameters().items():
                tensors[f"{role}/{name}"] = np.array(p.data, dtype=np.float32)
        for role, opt in (opts or {}).items():
            names = list(nets[role].named_parameters())
            st = opt.state
            optim[role] = {"t": st.t, "beta1": st.beta1, "beta2": st.beta2,
                           "epsilon": st.epsilon, "lr": opt.lr}
            for name, m, v in zip(names, st.m, st.v):
                tensors[f"opt/{role}/m/{name}"] = np.array(m, dtype=np.float32)
                tensors[f"opt/{role}/v/{name}"] = np.array(v, dtype=np.float32)
        return cls(archs, tensors, int(iteration), asdict(cfg), cfg.digest(), optim, dict(extra or {}))

    # -- network access ----------------------------------------------------
    def network(self, role):
        if role not in self.architectures:
            raise CheckpointError(f"checkpoint has no {role!r} network")
        net = build_from_config(self.architectures[role])
        self.load_into(net, role)
        return net

    def load_into(self, net, role):
        if net.config() != self.architectures.get(role):
            raise CheckpointError(f"architecture mismatch for {role!r}")
        prefix = f"{role}/"
        for name, p in net.named_parameters().items():
            arr = self.tensors[prefix + name]
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.data = arr.astype(p.data.dtype, copy=True)
        return net

    def restore_optimizer(self, opt, role, net):
        info = self.optimizers[role]
        st = opt.state
        st.t, st.beta1, st.beta2, st.epsilon = info["t"], info["beta1"], info["beta2"], info["epsilon"]
        names = list(net.named_parameters())
        st.m = [self.tensors[f"opt/{role}/m/{n}"].astype(np.float32) for n in names]
        st.v = [self.tensors[f"opt/{role}/v/{n}"].astype(np.float32) for n in names]
        opt.lr = info["lr"]
        return opt

    # -- serialisation -------------------------------------------------------
    def to_bytes(self):
        names = sorted(self.tensors)
        directory = [{"name": n, "shape": list(self.tensors[n].shape)} for n in names]
        header = {
            "architectures": self.architectures,
            "iteration": self.iteration,
            "config": self.config,
            "config_digest": self.config_digest,
            "optimizers": self.optimizers,
            "extra": self.extra,
            "directory": directory,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
        for n in names:
            parts.append(np.ascontiguousarray(self.tensors[n], dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < 16 or blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CheckpointError("checksum mismatch")
        version, hlen = struct.unpack("<II", body[4:12])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(body[12:12 + hlen].decode("utf-8"))
        offset = 12 + hlen
        tensors = {}
        for entry in header["directory"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape)
            tensors[entry["name"]] = arr.astype(np.float32)
            offset += 4 * count
        if offset != len(body):
            raise CheckpointError("trailing bytes in checkpoint payload")
        return cls(header["architectures"], tensors, header["iteration"], header["config"],
                   header["config_digest"], header["optimizers"], header["extra"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

