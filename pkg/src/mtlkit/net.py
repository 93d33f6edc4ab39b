"""Five-block CNN trunk with per-task exit heads at configurable depths.

Each block is conv3x3 -> relu -> conv3x3 -> relu -> maxpool2x2. A head is
global-average-pool -> linear -> relu -> linear; the emotion head adds a
sigmoid so outputs land in [0,1]. The trunk runs once per forward pass, up
to the deepest requested exit; heads read their branch activations.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LoadError, StructuralError

TASKS = ("age", "country", "emotion")
_HEAD_OUT = {"age": 1, "country": 4, "emotion": 10}

CHECKPOINT_MAGIC = b"MENC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ExitAssignment:
    age_exit: int
    country_exit: int
    emotion_exit: int

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not isinstance(v, int) or not 1 <= v <= 5:
                raise ConfigError(f"{name} must be an int in [1,5], got {v!r}")

    def as_tuple(self):
        return (self.age_exit, self.country_exit, self.emotion_exit)

    def as_dict(self):
        return {
            "age_exit": self.age_exit,
            "country_exit": self.country_exit,
            "emotion_exit": self.emotion_exit,
        }

    @property
    def deepest(self) -> int:
        return max(self.as_tuple())


@dataclass
class NetConfig:
    input_channels: int = 1
    input_height: int = 64
    input_width: int = 128
    block_channel_widths: tuple = (16, 32, 64, 64, 128)
    exit_assignment: ExitAssignment = field(default_factory=lambda: ExitAssignment(1, 3, 5))
    head_hidden: int = 64

    def __post_init__(self):
        if isinstance(self.exit_assignment, (tuple, list)):
            self.exit_assignment = ExitAssignment(*self.exit_assignment)
        self.block_channel_widths = tuple(int(w) for w in self.block_channel_widths)
        if len(self.block_channel_widths) != 5:
            raise ConfigError(
                f"block_channel_widths needs exactly 5 entries, got {len(self.block_channel_widths)}"
            )
        for key in ("input_channels", "input_height", "input_width", "head_hidden"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if any(w < 1 for w in self.block_channel_widths):
            raise ConfigError(f"channel widths must be positive, got {self.block_channel_widths}")

    def as_dict(self):
        return {
            "input_channels": self.input_channels,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "block_channel_widths": list(self.block_channel_widths),
            "exit_assignment": list(self.exit_assignment.as_tuple()),
            "head_hidden": self.head_hidden,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "exit_assignment" in d:
            d["exit_assignment"] = ExitAssignment(*d["exit_assignment"])
        return cls(**d)


class MultiExitNet:
    """Holds the parameter tensors; all compute goes through forward_multi."""

    def __init__(self, config: NetConfig, blocks, heads):
        self.config = config
        self.blocks = blocks  # list of 5 dicts: conv1_w, conv1_b, conv2_w, conv2_b
        self.heads = heads    # task -> dict: fc1_w, fc1_b, fc2_w, fc2_b
        self.block_eval_count = 0

    def parameters(self):
        """Deterministic (name, tensor) order: blocks 1..5, then heads by task."""
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            for key in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
                out.append((f"block{i}.{key}", blk[key]))
        for task in TASKS:
            for key in ("fc1_w", "fc1_b", "fc2_w", "fc2_b"):
                out.append((f"head_{task}.{key}", self.heads[task][key]))
        return out

    def state(self):
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state(self, state):
        mine = dict(self.parameters())
        if set(state) != set(mine):
            missing = set(mine) - set(state)
            extra = set(state) - set(mine)
            raise LoadError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in state.items():
            t = mine[name]
            if arr.shape != t.data.shape:
                raise LoadError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data[...] = arr


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_net(config: NetConfig, seed: int) -> MultiExitNet:
    """Deterministic initialization: He-uniform weights, zero biases.

    Trunk parameters are drawn before head parameters, so two configs that
    differ only in exit assignment share bitwise-identical trunks.
    """
    deepest = config.exit_assignment.deepest
    h, w = config.input_height, config.input_width
    for k in range(1, deepest + 1):
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise StructuralError(
                f"block {k}: spatial dims {h}x{w} cannot be maxpooled 2x2; "
                f"input must be divisible by 2^{deepest} through the deepest exit"
            )
        h //= 2
        w //= 2

    rng = np.random.default_rng(seed)
    widths = config.block_channel_widths
    blocks = []
    c_in = config.input_channels
    for k in range(5):
        c_out = widths[k]
        blk = {
            "conv1_w": Tensor(_he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), requires_grad=True),
            "conv1_b": Tensor(np.zeros((c_out, 1, 1)), requires_grad=True),
            "conv2_w": Tensor(_he_uniform(rng, (c_out, c_out, 3, 3), c_out * 9), requires_grad=True),
            "conv2_b": Tensor(np.zeros((c_out, 1, 1)), requires_grad=True),
        }
        blocks.append(blk)
        c_in = c_out

    exits = config.exit_assignment.as_dict()
    heads = {}
    for task in TASKS:
        depth = exits[f"{task}_exit"]
        in_feats = widths[depth - 1]
        hidden = config.head_hidden
        heads[task] = {
            "fc1_w": Tensor(_he_uniform(rng, (in_feats, hidden), in_feats), requires_grad=True),
            "fc1_b": Tensor(np.zeros(hidden), requires_grad=True),
            "fc2_w": Tensor(_he_uniform(rng, (hidden, _HEAD_OUT[task]), hidden), requires_grad=True),
            "fc2_b": Tensor(np.zeros(_HEAD_OUT[task]), requires_grad=True),
        }
    return MultiExitNet(config, blocks, heads)


def _head_forward(head, x, final_sigmoid: bool):
    h = ad.relu(ad.add(ad.matmul(x, head["fc1_w"]), head["fc1_b"]))
    out = ad.add(ad.matmul(h, head["fc2_w"]), head["fc2_b"])
    if final_sigmoid:
        out = ad.sigmoid(out)
    return out


def forward_multi(net: MultiExitNet, batch) -> dict:
    """One trunk pass up to the deepest exit, then the three heads.

    Returns {"emotion": (B,10) in [0,1], "country_logits": (B,4), "age": (B,1)}.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = net.config
    expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise StructuralError(
            f"forward_multi: batch shape {tuple(x.shape)} does not match (B, {expected[0]}, "
            f"{expected[1]}, {expected[2]})"
        )
    exits = net.config.exit_assignment
    deepest = exits.deepest

    acts = {}
    h = x
    for k in range(1, deepest + 1):
        blk = net.blocks[k - 1]
        h = ad.relu(ad.add(ad.conv2d(h, blk["conv1_w"], stride=1, padding=1), blk["conv1_b"]))
        h = ad.relu(ad.add(ad.conv2d(h, blk["conv2_w"], stride=1, padding=1), blk["conv2_b"]))
        h = ad.maxpool2d(h, 2, 2)
        acts[k] = h
        net.block_eval_count += 1

    pooled = {}

    def branch(depth):
        if depth not in pooled:
            pooled[depth] = ad.global_avg_pool(acts[depth])
        return pooled[depth]

    return {
        "age": _head_forward(net.heads["age"], branch(exits.age_exit), False),
        "country_logits": _head_forward(net.heads["country"], branch(exits.country_exit), False),
        "emotion": _head_forward(net.heads["emotion"], branch(exits.emotion_exit), True),
    }


def parameter_count(net: MultiExitNet) -> int:
    return sum(t.size for _, t in net.parameters())


def save_checkpoint(net: MultiExitNet, path):
    """Binary format: magic, version, length-prefixed JSON config, then each
    parameter as (name length, name, rank, dims, float64 little-endian values)."""
    params = net.parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg = json.dumps(net.config.as_dict()).encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(params)))
        for name, t in params:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> MultiExitNet:
    def take(f, n, what):
        b = f.read(n)
        if len(b) != n:
            raise LoadError(f"checkpoint truncated while reading {what}")
        return b

    try:
        f = open(path, "rb")
    except OSError as e:
        raise LoadError(f"{path}: cannot read checkpoint ({e.strerror})") from None
    with f:
        if take(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise LoadError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", take(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise LoadError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", take(f, 4, "config length"))
        try:
            cfg = NetConfig.from_dict(json.loads(take(f, cfg_len, "config")))
        except (ValueError, TypeError, KeyError, ConfigError) as e:
            raise LoadError(f"{path}: bad embedded config: {e}") from None
        (n_params,) = struct.unpack("<I", take(f, 4, "parameter count"))
        state = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", take(f, 4, "name length"))
            name = take(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", take(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", take(f, 4 * rank, "dims"))
            count = int(np.prod(dims)) if rank else 1
            raw = take(f, 8 * count, f"values of {name}")
            state[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        if f.read(1):
            raise LoadError(f"{path}: trailing bytes after last parameter")

    net = build_net(cfg, seed=0)
    net.load_state(state)
    return net
