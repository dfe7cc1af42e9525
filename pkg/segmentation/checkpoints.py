"""
Single-file checkpoint archive:

    b'GWCKPT01' | uint64 LE header length | JSON manifest | float32 LE payloads

The manifest records the model config, LoRA settings, schema version and,
per tensor, its name, shape, byte offset and trainable flag.
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from guidewire_platform.exceptions import CheckpointError

from .lora import attach_lora, lora_settings
from .networks import ModelConfig, PromptableSegmenter

MAGIC = b'GWCKPT01'
SCHEMA_VERSION = 1


def serialize_checkpoint(model, extra=None) -> bytes:
    trainable = {name: parameter.requires_grad for name, parameter in model.named_parameters()}
    entries, payloads, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype('<f4').tobytes()
        entries.append({
            'name': name,
            'shape': list(tensor.shape),
            'offset': offset,
            'nbytes': len(data),
            'trainable': trainable.get(name, False),
        })
        payloads.append(data)
        offset += len(data)

    manifest = {
        'schema_version': SCHEMA_VERSION,
        'config': model.config.to_dict(),
        'lora': lora_settings(model),
        'tensors': entries,
        'extra': extra or {},
    }
    header = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<Q', len(header)) + header + b''.join(payloads)


def deserialize_checkpoint(blob: bytes):
    """Rebuild ``(model, extra)`` from archive bytes."""
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError('not a checkpoint archive (bad magic)')
    start = len(MAGIC) + 8
    (header_len,) = struct.unpack('<Q', blob[len(MAGIC):start])
    try:
        manifest = json.loads(blob[start:start + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f'corrupt checkpoint manifest: {exc}') from exc
    if manifest.get('schema_version') != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {manifest.get('schema_version')}")

    model = PromptableSegmenter(ModelConfig.from_dict(manifest['config']))
    if manifest['lora']:
        attach_lora(model, manifest['lora']['rank'], manifest['lora']['scale'])

    payload = blob[start + header_len:]
    state = {}
    for entry in manifest['tensors']:
        chunk = payload[entry['offset']:entry['offset'] + entry['nbytes']]
        if len(chunk) != entry['nbytes']:
            raise CheckpointError(f"truncated payload for {entry['name']}")
        array = np.frombuffer(chunk, dtype='<f4').reshape(entry['shape']).astype(np.float32)
        state[entry['name']] = torch.from_numpy(array)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f'checkpoint does not match its config: {exc}') from exc

    flags = {entry['name']: entry['trainable'] for entry in manifest['tensors']}
    for name, parameter in model.named_parameters():
        parameter.requires_grad_(flags.get(name, False))
    return model, manifest['extra']


def save_checkpoint(model, path, extra=None) -> str:
    """Write the archive and return its SHA-256 digest."""
    blob = serialize_checkpoint(model, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f'checkpoint {path} does not exist')
    return deserialize_checkpoint(path.read_bytes())


def checkpoint_digest(model, extra=None) -> str:
    return hashlib.sha256(serialize_checkpoint(model, extra)).hexdigest()
