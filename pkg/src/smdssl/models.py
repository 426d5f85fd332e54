"""Trajectory network: modality encoders, sequence module, heads, classifier.

The encoder embeds each timestep by concatenating a structured-features
embedding, a static-features embedding, and a residual-CNN signal embedding,
then runs a GRU over the sequence; the last hidden state is the trajectory
embedding. Projection heads sit on the signal embeddings (component level)
and the trajectory embedding (global level). Checkpoints are a JSON header
plus a contiguous little-endian float payload.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor

CHECKPOINT_MAGIC = b"SMDSSL1"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class MLPConfig:
    layers: int = 2
    hidden: int = 128
    out_dim: int = 128


@dataclass
class SignalEncoderConfig:
    stage_channels: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    kernel: int = 15
    out_dim: int = 128
    stem_pool: bool = True  # extra stride-2 in the first stage (maxpool analog)


@dataclass
class SequenceConfig:
    layers: int = 4
    hidden: int = 384


@dataclass
class HeadConfig:
    layers: int = 2
    hidden: int = 2048
    out_dim: int = 128
    batchnorm: bool = True
    normalize_for_nt_xent: bool = True


@dataclass
class ModelConfig:
    mode: str = "multimodal"  # or "unimodal" (signals only)
    structured_encoder: MLPConfig = field(default_factory=MLPConfig)
    static_encoder: MLPConfig = field(default_factory=MLPConfig)
    signal_encoder: SignalEncoderConfig = field(default_factory=SignalEncoderConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    with_predictors: bool = False  # predictor branches (only for the cosine/stop-gradient family)

    @staticmethod
    def paper(mode="multimodal"):
        return ModelConfig(mode=mode)

    @staticmethod
    def desk(mode="multimodal"):
        """Shrunk preset so the full pipeline runs in minutes on a CPU."""
        return ModelConfig(
            mode=mode,
            structured_encoder=MLPConfig(layers=2, hidden=64, out_dim=32),
            static_encoder=MLPConfig(layers=2, hidden=64, out_dim=32),
            signal_encoder=SignalEncoderConfig(
                stage_channels=(16, 32, 64, 128), blocks_per_stage=(1, 1, 1, 1),
                kernel=15, out_dim=64,
            ),
            sequence=SequenceConfig(layers=2, hidden=64),
            head=HeadConfig(layers=2, hidden=128, out_dim=64),
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        for key, cls in [
            ("structured_encoder", MLPConfig), ("static_encoder", MLPConfig),
            ("signal_encoder", SignalEncoderConfig), ("sequence", SequenceConfig),
            ("head", HeadConfig),
        ]:
            if key in d and isinstance(d[key], dict):
                d[key] = cls(**d[key])
        cfg = ModelConfig(**d)
        cfg.signal_encoder.stage_channels = tuple(cfg.signal_encoder.stage_channels)
        cfg.signal_encoder.blocks_per_stage = tuple(cfg.signal_encoder.blocks_per_stage)
        return cfg


# ---------------------------------------------------------------------------
# module machinery


class Module:
    """Minimal container: discovers parameters, buffers, and children by
    walking instance attributes in definition order, which keeps checkpoint
    names stable."""

    def named_tensors(self, prefix=""):
        """Yield (name, owner, attr, trainable) for params and buffers."""
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, self, attr, True
            elif isinstance(value, np.ndarray):
                yield name, self, attr, False
            elif isinstance(value, Module):
                yield from value.named_tensors(f"{name}.")
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield from child.named_tensors(f"{name}.{i}.")

    def parameters(self):
        return [getattr(owner, attr) for _, owner, attr, trainable in self.named_tensors() if trainable]

    def named_parameters(self):
        return [(name, getattr(owner, attr)) for name, owner, attr, t in self.named_tensors() if t]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for child in value:
                    yield from child.modules()

    def set_training(self, flag):
        for m in self.modules():
            m.training = flag

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self):
        """name -> (array, trainable), in stable order."""
        out = {}
        for name, owner, attr, trainable in self.named_tensors():
            value = getattr(owner, attr)
            out[name] = (value.data if trainable else value, trainable)
        return out

    def load_state_arrays(self, state):
        for name, owner, attr, trainable in self.named_tensors():
            arr = state[name]
            if trainable:
                getattr(owner, attr).data = np.array(arr, dtype=DTYPE)
            else:
                setattr(owner, attr, np.array(arr, dtype=DTYPE))


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = _kaiming_uniform(rng, (in_dim, out_dim), in_dim)
        if bias:
            bound = 1.0 / np.sqrt(in_dim)
            self.bias = Tensor(rng.uniform(-bound, bound, out_dim), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x):
        out = ad.matmul(x, self.weight)
        return ad.add(out, self.bias) if self.bias is not None else out


class Conv1d(Module):
    """Convolution layer; layers feeding batchnorm carry no bias (it would
    be cancelled by the mean subtraction)."""

    def __init__(self, in_channels, out_channels, kernel, stride, rng, bias=False):
        fan_in = in_channels * kernel
        self.weight = _kaiming_uniform(rng, (out_channels, in_channels, kernel), fan_in)
        if bias:
            bound = 1.0 / np.sqrt(fan_in)
            self.bias = Tensor(rng.uniform(-bound, bound, out_channels), requires_grad=True)
        else:
            self.bias = None
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        return ad.conv1d(x, self.weight, stride=self.stride, padding=self.padding, bias=self.bias)


class BatchNorm1d(Module):
    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=DTYPE)
        self.running_var = np.ones(num_features, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x):
        y, rm, rv = ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )
        if self.training:
            self.running_mean, self.running_var = rm, rv
        return y


class MLP(Module):
    """Fully-connected stack with ReLU after every layer."""

    def __init__(self, in_dim, hidden, out_dim, layers, rng):
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.linears = [Linear(dims[i], dims[i + 1], rng) for i in range(layers)]

    def __call__(self, x):
        for linear in self.linears:
            x = ad.relu(linear(x))
        return x


class ProjectionHead(Module):
    """Linear -> batchnorm -> ReLU -> Linear, as used for both heads."""

    def __init__(self, in_dim, hidden, out_dim, rng, batchnorm=True):
        self.fc1 = Linear(in_dim, hidden, rng, bias=not batchnorm)
        self.bn = BatchNorm1d(hidden) if batchnorm else None
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x, normalize=False):
        h = self.fc1(x)
        if self.bn is not None:
            h = self.bn(h)
        h = ad.relu(h)
        h = self.fc2(h)
        if normalize:
            h = ad.l2_normalize(h, axis=1)
        return h


class ResidualBlock1d(Module):
    """Two conv-bn stages with an additive skip; stride downsamples."""

    def __init__(self, in_channels, out_channels, kernel, stride, rng):
        self.conv1 = Conv1d(in_channels, out_channels, kernel, stride, rng)
        self.bn1 = BatchNorm1d(out_channels)
        self.conv2 = Conv1d(out_channels, out_channels, kernel, 1, rng)
        self.bn2 = BatchNorm1d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.skip_conv = Conv1d(in_channels, out_channels, 1, stride, rng)
            self.skip_bn = BatchNorm1d(out_channels)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def __call__(self, x):
        out = ad.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x))
        return ad.relu(ad.add(out, skip))


class SignalEncoder(Module):
    """Residual 1-D CNN with global average pooling and a linear projection.

    The stem halves the temporal resolution; each later stage halves it
    again. ``forward(..., collect_stages=True)`` also returns the pooled
    output of every residual stage for representation-similarity analysis.
    """

    def __init__(self, cfg: SignalEncoderConfig, in_channels, rng):
        base = cfg.stage_channels[0]
        self.stem = Conv1d(in_channels, base, cfg.kernel, 2, rng)
        self.stem_bn = BatchNorm1d(base)
        self.blocks = []
        prev = base
        for stage, channels in enumerate(cfg.stage_channels):
            for b in range(cfg.blocks_per_stage[stage]):
                downsample = b == 0 and (stage > 0 or cfg.stem_pool)
                self.blocks.append(ResidualBlock1d(prev, channels, cfg.kernel, 2 if downsample else 1, rng))
                prev = channels
        self.fc = Linear(prev, cfg.out_dim, rng)
        self.stage_boundaries = [int(x) for x in np.cumsum(cfg.blocks_per_stage)]

    def __call__(self, x, collect_stages=False):
        h = ad.relu(self.stem_bn(self.stem(x)))
        stages = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            if collect_stages and (i + 1) in self.stage_boundaries:
                stages.append(ad.global_avg_pool(h))
        emb = self.fc(ad.global_avg_pool(h))
        if collect_stages:
            return emb, stages
        return emb


class GRULayer(Module):
    def __init__(self, in_dim, hidden, rng):
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = Tensor(rng.uniform(-bound, bound, (3 * hidden, in_dim)), requires_grad=True)
        self.w_hh = Tensor(rng.uniform(-bound, bound, (3 * hidden, hidden)), requires_grad=True)
        self.b_ih = Tensor(rng.uniform(-bound, bound, 3 * hidden), requires_grad=True)
        self.b_hh = Tensor(rng.uniform(-bound, bound, 3 * hidden), requires_grad=True)

    def step(self, x, h):
        return ad.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class GRU(Module):
    """Stacked GRU; returns the last layer's final hidden state."""

    def __init__(self, in_dim, hidden, layers, rng):
        self.cells = [GRULayer(in_dim if i == 0 else hidden, hidden, rng) for i in range(layers)]
        self.hidden = hidden

    def __call__(self, z_seq):
        """z_seq: list of (B, D) tensors, one per timestep."""
        batch = z_seq[0].shape[0]
        seq = z_seq
        for cell in self.cells:
            h = Tensor(np.zeros((batch, self.hidden)))
            outputs = []
            for z_t in seq:
                h = cell.step(z_t, h)
                outputs.append(h)
            seq = outputs
        return seq[-1]


class TrajectoryModel(Module):
    """Complete encoder + heads + classifier bundle.

    Construction order is fixed so parameter names and the init RNG stream
    are reproducible for a given (config, data dims, seed).
    """

    def __init__(self, config: ModelConfig, data_dims, seed):
        self.config = config
        self.data_dims = dict(data_dims)  # static_dim, structured_dim, channels
        self.init_seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.init_seed))
        cfg = config
        self.signal_encoder = SignalEncoder(cfg.signal_encoder, self.data_dims["channels"], rng)
        if cfg.mode == "multimodal":
            self.structured_encoder = MLP(
                self.data_dims["structured_dim"], cfg.structured_encoder.hidden,
                cfg.structured_encoder.out_dim, cfg.structured_encoder.layers, rng,
            )
            self.static_encoder = MLP(
                self.data_dims["static_dim"], cfg.static_encoder.hidden,
                cfg.static_encoder.out_dim, cfg.static_encoder.layers, rng,
            )
            z_dim = cfg.structured_encoder.out_dim + cfg.static_encoder.out_dim + cfg.signal_encoder.out_dim
        elif cfg.mode == "unimodal":
            self.structured_encoder = None
            self.static_encoder = None
            z_dim = cfg.signal_encoder.out_dim
        else:
            raise ValueError(f"unknown mode {cfg.mode!r}")
        self.z_dim = z_dim
        self.gru = GRU(z_dim, cfg.sequence.hidden, cfg.sequence.layers, rng)
        self.global_head = ProjectionHead(cfg.sequence.hidden, cfg.head.hidden, cfg.head.out_dim, rng, cfg.head.batchnorm)
        self.signal_head = ProjectionHead(cfg.signal_encoder.out_dim, cfg.head.hidden, cfg.head.out_dim, rng, cfg.head.batchnorm)
        if cfg.with_predictors:
            self.global_predictor = ProjectionHead(cfg.head.out_dim, cfg.head.hidden, cfg.head.out_dim, rng, cfg.head.batchnorm)
            self.signal_predictor = ProjectionHead(cfg.head.out_dim, cfg.head.hidden, cfg.head.out_dim, rng, cfg.head.batchnorm)
        else:
            self.global_predictor = None
            self.signal_predictor = None
        self.classifier = Linear(cfg.sequence.hidden, 1, rng)
        self.set_training(True)

    # -- encoding ----------------------------------------------------------

    def embed_signals(self, s, collect_stages=False):
        """s: (N, C, P) tensor/array of signals -> (N, out_dim) embeddings."""
        return self.signal_encoder(ad.as_tensor(s), collect_stages=collect_stages)

    def encode_timestep(self, d, w_t, s_t):
        """One timestep: concat of modality embeddings (statelessly)."""
        sig = self.embed_signals(s_t)
        if self.config.mode == "unimodal":
            return sig
        return ad.concat([self.structured_encoder(ad.as_tensor(w_t)), self.static_encoder(ad.as_tensor(d)), sig], axis=1)

    def encode_trajectory(self, d, w, s, signal_embeddings=None):
        """Encode a batch of trajectories to (B, hidden).

        d: (B, L), w: (B, T, M), s: (B, T, C, P). If the per-timestep signal
        embeddings were already computed (e.g. shared with the component
        head), pass them as a (B*T, E) tensor to avoid re-encoding.
        """
        B, T = s.shape[0], s.shape[1]
        if signal_embeddings is None:
            flat = ad.reshape(ad.as_tensor(s), (B * T,) + tuple(s.shape[2:]))
            signal_embeddings = self.embed_signals(flat)
        if self.config.mode == "multimodal":
            w_emb = self.structured_encoder(ad.reshape(ad.as_tensor(w), (B * T, w.shape[2])))
            d_emb = self.static_encoder(ad.as_tensor(d))
        z_seq = []
        for t in range(T):
            rows = np.arange(B) * T + t
            sig_t = signal_embeddings[rows]
            if self.config.mode == "multimodal":
                z_seq.append(ad.concat([w_emb[rows], d_emb, sig_t], axis=1))
            else:
                z_seq.append(sig_t)
        return self.gru(z_seq)

    def project_global(self, z, normalize):
        return self.global_head(z, normalize=normalize)

    def project_signals(self, emb, normalize):
        return self.signal_head(emb, normalize=normalize)

    def classify(self, z):
        """Scalar logit per trajectory: (B, hidden) -> (B,)."""
        return ad.reshape(self.classifier(z), (z.shape[0],))

    def reinit_classifier(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        self.classifier = Linear(self.config.sequence.hidden, 1, rng)

    def encoder_parameters(self):
        """Everything except the classifier (for the frozen-encoder checks)."""
        skip = {id(p) for p in self.classifier.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]


def init_model(config: ModelConfig, data_dims, seed) -> TrajectoryModel:
    return TrajectoryModel(config, data_dims, seed)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrajectoryModel, path):
    """Binary checkpoint: magic, length-prefixed JSON header, float payload."""
    state = model.state_arrays()
    tensors = {}
    offset = 0
    chunks = []
    for name, (arr, trainable) in state.items():
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        tensors[name] = {
            "shape": list(arr.shape),
            "dtype": "<f8",
            "offset": offset,
            "trainable": trainable,
        }
        raw = arr.astype("<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {
        "magic": CHECKPOINT_MAGIC.decode(),
        "config": model.config.to_dict(),
        "data_dims": model.data_dims,
        "seed": model.init_seed,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path) -> TrajectoryModel:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len))
        payload = f.read()
    config = ModelConfig.from_dict(header["config"])
    model = TrajectoryModel(config, header["data_dims"], header["seed"])
    state = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        state[name] = arr.astype(DTYPE)
    model.load_state_arrays(state)
    return model


def checkpoint_header(path):
    """Read only the JSON header (for architecture comparisons)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(header_len))
