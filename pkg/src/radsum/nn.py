"""Shared neural building blocks.

Sequence encoders, additive attention, the clipped-Adam update helper, a
finite-difference gradient checker (the independent oracle for every
autograd path in the project) and a deterministic binary checkpoint format.
"""

import json
import random
import struct

import numpy as np
import torch
from torch import nn

INIT_RANGE = 0.08


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def init_uniform_(module):
    """uniform(-0.08, 0.08) weights, zero biases, for small LSTM stacks."""
    for name, p in module.named_parameters():
        if "bias" in name:
            nn.init.zeros_(p)
        else:
            nn.init.uniform_(p, -INIT_RANGE, INIT_RANGE)


class BiLSTMEncoder(nn.Module):
    """Single-layer bidirectional LSTM over one sequence.

    Output per position is the concatenation of both directions
    (seq_len, 2 * hidden).
    """

    def __init__(self, input_dim, hidden):
        super().__init__()
        self.hidden = hidden
        self.lstm = nn.LSTM(input_dim, hidden, bidirectional=True, batch_first=True)
        init_uniform_(self.lstm)

    def forward(self, inputs):
        if inputs.dim() != 2:
            raise ValueError("expected (seq_len, features)")
        out, _ = self.lstm(inputs.unsqueeze(0))
        return out.squeeze(0)


class ConvSentenceEncoder(nn.Module):
    """Max-over-time 1-D convolutions over concatenated word and position
    embeddings; one filter bank per window size, outputs concatenated."""

    def __init__(self, input_dim, filters=100, windows=(3, 4, 5)):
        super().__init__()
        self.windows = tuple(windows)
        self.convs = nn.ModuleList(
            nn.Conv1d(input_dim, filters, k) for k in self.windows)
        self.output_dim = filters * len(self.windows)
        init_uniform_(self)

    def forward(self, word_embs, pos_embs):
        if word_embs.shape[0] != pos_embs.shape[0]:
            raise ValueError("word and position embeddings must align")
        x = torch.cat([word_embs, pos_embs], dim=1)
        longest = max(self.windows)
        if x.shape[0] < longest:
            pad = x.new_zeros((longest - x.shape[0], x.shape[1]))
            x = torch.cat([x, pad], dim=0)
        x = x.t().unsqueeze(0)  # (1, channels, seq_len)
        pooled = [torch.relu(conv(x)).max(dim=2).values.squeeze(0) for conv in self.convs]
        return torch.cat(pooled)


class AdditiveAttention(nn.Module):
    """score_i = v . tanh(Wq q + Wk k_i); context = sum_i softmax(score)_i k_i."""

    def __init__(self, query_dim, key_dim, attn_dim):
        super().__init__()
        self.wq = nn.Linear(query_dim, attn_dim, bias=False)
        self.wk = nn.Linear(key_dim, attn_dim, bias=False)
        self.v = nn.Parameter(torch.empty(attn_dim))
        init_uniform_(self)
        nn.init.uniform_(self.v, -INIT_RANGE, INIT_RANGE)

    def scores(self, query, keys, mask=None):
        if keys.shape[0] == 0:
            raise ValueError("attention needs at least one key")
        energy = torch.tanh(self.wq(query) + self.wk(keys)) @ self.v
        if mask is not None:
            energy = energy.masked_fill(mask, float("-inf"))
        return torch.softmax(energy, dim=0)

    def forward(self, query, keys, mask=None):
        attn = self.scores(query, keys, mask)
        context = attn @ keys
        return attn, context


class ClippedAdam:
    """Adam with global 2-norm gradient clipping; rejects non-finite grads."""

    def __init__(self, parameters, lr, clip_norm=1.5):
        self.parameters = list(parameters)
        self.clip_norm = clip_norm
        self.opt = torch.optim.Adam(self.parameters, lr=lr)

    def step(self, named_parameters=None):
        if named_parameters is not None:
            for name, p in named_parameters:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise FloatingPointError(f"non-finite gradient in {name}")
        torch.nn.utils.clip_grad_norm_(self.parameters, self.clip_norm)
        self.opt.step()
        self.opt.zero_grad()

    def zero_grad(self):
        self.opt.zero_grad()


def finite_difference_check(loss_fn, named_params, epsilon=1e-5,
                            tolerance=1e-4, max_coords=24, seed=0):
    """Compare autograd gradients of `loss_fn` with central differences.

    `loss_fn` must be a deterministic zero-argument callable returning a
    scalar tensor built from the given parameters. Coordinates are sampled
    per parameter. Returns a report dict; `report["passed"]` is the verdict.
    """
    named_params = list(named_params)
    rng = random.Random(seed)
    for _, p in named_params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p))
                for name, p in named_params}
    max_rel_err, worst, failures = 0.0, None, []
    with torch.no_grad():
        for name, p in named_params:
            flat = p.view(-1)
            coords = range(flat.numel()) if flat.numel() <= max_coords else \
                rng.sample(range(flat.numel()), max_coords)
            for idx in coords:
                orig = flat[idx].item()
                flat[idx] = orig + epsilon
                with torch.enable_grad():
                    up = loss_fn().item()
                flat[idx] = orig - epsilon
                with torch.enable_grad():
                    down = loss_fn().item()
                flat[idx] = orig
                fd = (up - down) / (2 * epsilon)
                an = analytic[name].view(-1)[idx].item()
                denom = max(abs(fd), abs(an), 1e-8)
                rel = abs(fd - an) / denom if denom > 1e-8 else 0.0
                if abs(fd - an) < 1e-9:
                    rel = 0.0
                if rel > max_rel_err:
                    max_rel_err, worst = rel, name
                if rel > tolerance:
                    failures.append((name, idx, an, fd, rel))
    for _, p in named_params:
        p.grad = None
    return {"passed": not failures, "max_rel_err": max_rel_err,
            "worst_param": worst, "failures": failures}


# ---------------------------------------------------------------------------
# Checkpoints
#
# Byte layout (little-endian, documented for external readers):
#   magic   8 bytes  b"RADSUMCK"
#   version u32
#   hlen    u64      length of the JSON header in bytes
#   header  hlen bytes, UTF-8 JSON:
#     {"meta": {...}, "arrays": [{"name", "dtype", "shape", "nbytes"}, ...]}
#   payload concatenated C-order raw array bytes, in header order
#
# Arrays are sorted by name, so identical states serialize identically.

CHECKPOINT_MAGIC = b"RADSUMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays, meta):
    """Write named numpy arrays plus a JSON-serializable meta block."""
    entries, blobs = [], []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": list(arr.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            blob = f.read(entry["nbytes"])
            arrays[entry["name"]] = np.frombuffer(
                blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def state_to_arrays(module):
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(module, arrays):
    current = module.state_dict()
    state = {k: torch.from_numpy(np.ascontiguousarray(v)).to(current[k].dtype)
             for k, v in arrays.items()}
    module.load_state_dict(state)


def save_module(path, module, meta):
    save_checkpoint(path, state_to_arrays(module), meta)


def load_module(path, module):
    arrays, meta = load_checkpoint(path)
    arrays_to_state(module, arrays)
    return meta
