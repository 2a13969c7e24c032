"""
Checkpoint files: an 8-byte magic, a little-endian uint32 format version,
then a ``torch.save`` payload with encoder, queue and optimizer state plus the
step counters and the flat config echo.
"""

import io
import os
import struct

import torch

from wildmoco.dir_helper import ensure_dir

MAGIC = b"WMOCOCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_name(step):
    return f"ckpt_{step}.bin"


def save_checkpoint(path, payload):
    ensure_dir(os.path.dirname(path))
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as fout:
        fout.write(MAGIC)
        fout.write(struct.pack("<I", VERSION))
        fout.write(buffer.getvalue())
    os.replace(tmp_path, path)
    return path


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fin:
        blob = fin.read()
    header = len(MAGIC) + 4
    if len(blob) < header or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[len(MAGIC):header])
    if version != VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {VERSION}")
    try:
        payload = torch.load(io.BytesIO(blob[header:]), map_location="cpu")
    except Exception as e:
        raise CheckpointError(f"{path} payload is unreadable: {e}") from e
    for key in ("state", "step", "config"):
        if key not in payload:
            raise CheckpointError(f"{path} payload lacks '{key}'")
    return payload


def latest_checkpoint(directory):
    steps = []
    for fname in os.listdir(directory) if os.path.isdir(directory) else []:
        if fname.startswith("ckpt_") and fname.endswith(".bin"):
            try:
                steps.append(int(fname[len("ckpt_"):-len(".bin")]))
            except ValueError:
                continue
    if not steps:
        return None
    return os.path.join(directory, checkpoint_name(max(steps)))
