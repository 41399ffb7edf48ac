"""Image-conditioned autoregressive graph models.

The main model ("ggt") couples a small CNN image encoder with a stack of
causal self-attention decoder blocks; per step it emits a soft adjacency
vector (with the stop flag as an extra channel) and a coordinate pair. The
one-shot MLP and the GRU ("rnn") baselines share the encoder and the output
head structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import RoadGraph
from .ordering import CanonicalSequence, from_sequence

MLP_BASELINE_NODES = 10  # one-shot emission size; the dataset filter keeps |V| < 10
MLP_BASELINE_HIDDEN = 1600
RNN_HIDDEN = 256


@dataclass
class GGTConfig:
    frontier: int  # M: adjacency lookback width
    blocks: int = 12  # L: decoder depth
    width: int = 256  # d: hidden size
    heads: int = 8
    mlp_inner: int = 2048
    head_hidden: int = 128
    ca_hidden: int = 1800
    context_attention: bool = True
    exclude_self_attention: bool = False
    image_size: int = 64
    encoder_out: int = 900  # fixed by the conv stack: 30 * 30 after flatten

    def __post_init__(self) -> None:
        if self.frontier < 1:
            raise ValueError("frontier must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for f in ("blocks", "width", "heads", "mlp_inner", "head_hidden", "ca_hidden"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")

    @property
    def step_width(self) -> int:
        """Per-step input record: adjacency + stop channel + 2 coords."""
        return self.frontier + 3

    @property
    def input_width(self) -> int:
        return self.step_width + self.encoder_out

    def to_dict(self) -> dict:
        return {
            "frontier": self.frontier,
            "blocks": self.blocks,
            "width": self.width,
            "heads": self.heads,
            "mlp_inner": self.mlp_inner,
            "head_hidden": self.head_hidden,
            "ca_hidden": self.ca_hidden,
            "context_attention": self.context_attention,
            "exclude_self_attention": self.exclude_self_attention,
            "image_size": self.image_size,
            "encoder_out": self.encoder_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GGTConfig":
        return cls(**d)


def positional_encoding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal position vector: sin at even slots, cos at odd slots."""
    if t < 0:
        raise ValueError("t must be >= 0")
    p = np.zeros(dim)
    half = (dim + 1) // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    p[0::2] = np.sin(t * freqs)
    p[1::2] = np.cos(t * freqs[: dim // 2])
    return p


def positional_matrix(n_steps: int, dim: int) -> np.ndarray:
    return np.stack([positional_encoding(t, dim) for t in range(n_steps)])


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        a = math.sqrt(6.0 / (n_in + n_out))
        self.w = ad.Parameter(rng.uniform(-a, a, (n_in, n_out)))
        self.b = ad.Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        y = ad.matmul(x, self.w)
        return y + self.b if self.b is not None else y

    def params(self, prefix: str) -> dict[str, ad.Parameter]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class _ConvBN:
    def __init__(self, rng, c_in, c_out, k, padding):
        a = math.sqrt(6.0 / (c_in * k * k + c_out * k * k))
        self.w = ad.Parameter(rng.uniform(-a, a, (c_out, c_in, k, k)))
        self.b = ad.Parameter(np.zeros(c_out))
        self.gamma = ad.Parameter(np.ones(c_out))
        self.beta = ad.Parameter(np.zeros(c_out))
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)
        self.padding = padding

    def __call__(self, x, training):
        h = ad.conv2d(x, self.w, self.b, padding=self.padding)
        h = ad.batchnorm2d(
            h, self.gamma, self.beta, self.running_mean, self.running_var, training
        )
        return ad.leaky_relu(h)

    def params(self, prefix):
        return {
            f"{prefix}.w": self.w,
            f"{prefix}.b": self.b,
            f"{prefix}.gamma": self.gamma,
            f"{prefix}.beta": self.beta,
        }

    def buffers(self, prefix):
        return {
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }


class ImageEncoder:
    """64x64 raster -> 900-dim code.

    conv3x3(1->8, pad 1) + BN + LeakyReLU, maxpool 2x2,
    conv3x3(8->16, valid) + BN + LeakyReLU, conv1x1(16->1), flatten 30x30.
    """

    def __init__(self, rng: np.random.Generator, image_size: int = 64):
        self.image_size = image_size
        self.block1 = _ConvBN(rng, 1, 8, 3, padding=1)
        self.block2 = _ConvBN(rng, 8, 16, 3, padding=0)
        a = math.sqrt(6.0 / (16 + 1))
        self.w_out = ad.Parameter(rng.uniform(-a, a, (1, 16, 1, 1)))
        self.b_out = ad.Parameter(np.zeros(1))

    def __call__(self, images: np.ndarray, training: bool) -> ad.Tensor:
        """images: (B, H, W) -> codes (B, 900)."""
        if images.ndim != 3 or images.shape[1:] != (self.image_size, self.image_size):
            raise ad.ShapeMismatch(
                f"encoder expects (B, {self.image_size}, {self.image_size}), got {images.shape}"
            )
        x = ad.Tensor(images[:, None, :, :])
        h = self.block1(x, training)
        h = ad.maxpool2d(h, 2)
        h = self.block2(h, training)
        h = ad.conv2d(h, self.w_out, self.b_out)
        side = self.image_size // 2 - 2
        return ad.reshape(h, (images.shape[0], side * side))

    def params(self, prefix: str = "encoder") -> dict[str, ad.Parameter]:
        out = {}
        out.update(self.block1.params(f"{prefix}.block1"))
        out.update(self.block2.params(f"{prefix}.block2"))
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    def buffers(self, prefix: str = "encoder") -> dict[str, np.ndarray]:
        out = {}
        out.update(self.block1.buffers(f"{prefix}.block1"))
        out.update(self.block2.buffers(f"{prefix}.block2"))
        return out


class ContextAttention:
    """Per-step softmax mask over the flattened image code."""

    def __init__(self, rng, cfg: GGTConfig):
        self.lin1 = Linear(rng, cfg.step_width + cfg.encoder_out, cfg.ca_hidden)
        self.lin2 = Linear(rng, cfg.ca_hidden, cfg.encoder_out)

    def __call__(self, prev_steps: np.ndarray, code_rows: ad.Tensor) -> ad.Tensor:
        """prev_steps: (T, M+3) teacher-forced inputs; code_rows: (T, 900)."""
        s = self.lin2(ad.relu(self.lin1(ad.concat([ad.Tensor(prev_steps), code_rows], axis=1))))
        mask = ad.softmax(s, axis=-1)
        return ad.mul(code_rows, mask)

    def params(self, prefix: str = "ca") -> dict[str, ad.Parameter]:
        out = self.lin1.params(f"{prefix}.lin1")
        out.update(self.lin2.params(f"{prefix}.lin2"))
        return out


class OutputHeads:
    """Two-layer heads emitting the soft adjacency (+stop) vector and the coords."""

    def __init__(self, rng, n_in: int, hidden: int, frontier: int):
        self.a1 = Linear(rng, n_in, hidden)
        self.a2 = Linear(rng, hidden, frontier + 1)
        self.x1 = Linear(rng, n_in, hidden)
        self.x2 = Linear(rng, hidden, 2)

    def __call__(self, h: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        adj = ad.sigmoid(self.a2(ad.relu(self.a1(h))))
        coords = ad.tanh(self.x2(ad.relu(self.x1(h))))
        return adj, coords

    def params(self, prefix: str = "heads") -> dict[str, ad.Parameter]:
        out = {}
        for name, lin in (("a1", self.a1), ("a2", self.a2), ("x1", self.x1), ("x2", self.x2)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


class _DecoderBlock:
    def __init__(self, rng, cfg: GGTConfig):
        d = cfg.width
        self.wq = Linear(rng, d, d, bias=False)
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.wo = Linear(rng, d, d, bias=False)
        self.ln1_g = ad.Parameter(np.ones(d))
        self.ln1_b = ad.Parameter(np.zeros(d))
        self.wm = Linear(rng, d, cfg.mlp_inner)
        self.wn = Linear(rng, cfg.mlp_inner, d)
        self.ln2_g = ad.Parameter(np.ones(d))
        self.ln2_b = ad.Parameter(np.zeros(d))
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads

    def __call__(self, h: ad.Tensor, allow: np.ndarray) -> ad.Tensor:
        T = h.data.shape[0]
        d = self.heads * self.head_dim

        def split(x):  # (T, d) -> (heads, T, head_dim)
            return ad.transpose(ad.reshape(x, (T, self.heads, self.head_dim)), (1, 0, 2))

        q = split(self.wq(h))
        k = split(self.wk(h))
        v = split(self.wv(h))
        scores = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / math.sqrt(self.head_dim))
        weights = ad.masked_softmax(scores, allow[None, :, :])
        ctx = ad.matmul(weights, v)  # (heads, T, head_dim)
        ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (T, d))
        h = ad.layernorm(h + self.wo(ctx), self.ln1_g, self.ln1_b)
        h = ad.layernorm(h + self.wn(ad.relu(self.wm(h))), self.ln2_g, self.ln2_b)
        return h

    def params(self, prefix: str) -> dict[str, ad.Parameter]:
        out = {}
        for name, lin in (
            ("wq", self.wq),
            ("wk", self.wk),
            ("wv", self.wv),
            ("wo", self.wo),
            ("wm", self.wm),
            ("wn", self.wn),
        ):
            out.update(lin.params(f"{prefix}.{name}"))
        out[f"{prefix}.ln1.gamma"] = self.ln1_g
        out[f"{prefix}.ln1.beta"] = self.ln1_b
        out[f"{prefix}.ln2.gamma"] = self.ln2_g
        out[f"{prefix}.ln2.beta"] = self.ln2_b
        return out


def teacher_inputs(seq: CanonicalSequence) -> np.ndarray:
    """Per-step decoder inputs: the previous step's record, zeros at step 0."""
    rec = np.concatenate([seq.adjacency_with_stop(), seq.coords], axis=1)
    inputs = np.zeros_like(rec)
    inputs[1:] = rec[:-1]
    return inputs


class GGT:
    """Causal self-attention decoder over the step sequence, conditioned on the image."""

    def __init__(self, cfg: GGTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(rng, cfg.image_size)
        self.ca = ContextAttention(rng, cfg) if cfg.context_attention else None
        self.w_in = Linear(rng, cfg.input_width, cfg.width)
        self.blocks = [_DecoderBlock(rng, cfg) for _ in range(cfg.blocks)]
        self.heads = OutputHeads(rng, cfg.width, cfg.head_hidden, cfg.frontier)

    def _allow_mask(self, T: int) -> np.ndarray:
        if self.cfg.exclude_self_attention:
            return np.tril(np.ones((T, T), dtype=bool), k=-1)
        return np.tril(np.ones((T, T), dtype=bool))

    def conditioned_inputs(self, prev_steps: np.ndarray, code: ad.Tensor) -> ad.Tensor:
        """Assemble [prev record, conditioned code] rows for every step."""
        T = len(prev_steps)
        code_rows = ad.add(ad.Tensor(np.zeros((T, self.cfg.encoder_out))), code)
        if self.ca is not None:
            code_rows = self.ca(prev_steps, code_rows)
        return ad.concat([ad.Tensor(prev_steps), code_rows], axis=1)

    def decode(self, inputs: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """inputs: (T, input_width) -> soft adjacency (T, M+1) and coords (T, 2)."""
        T = inputs.data.shape[0]
        h = self.w_in(inputs + positional_matrix(T, self.cfg.input_width))
        allow = self._allow_mask(T)
        for block in self.blocks:
            h = block(h, allow)
        return self.heads(h)

    def forward_teacher(
        self, image: np.ndarray, seq: CanonicalSequence, training: bool
    ) -> tuple[ad.Tensor, ad.Tensor]:
        code = self.encoder(image[None], training)
        prev = teacher_inputs(seq)
        return self.decode(self.conditioned_inputs(prev, code))

    def generate(self, image: np.ndarray, max_steps: int = 16) -> RoadGraph:
        """Autoregressive decoding: feed back thresholded adjacency and raw coords."""
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        M = self.cfg.frontier
        with ad.no_grad():
            code = self.encoder(image[None], training=False)
            prev = np.zeros((1, self.cfg.step_width))
            soft_adj: list[np.ndarray] = []
            soft_coords: list[np.ndarray] = []
            for t in range(max_steps):
                adj, coords = self.decode(self.conditioned_inputs(prev, code))
                a_t = adj.data[t]
                x_t = coords.data[t]
                soft_adj.append(a_t)
                soft_coords.append(x_t)
                if a_t[M] > 0.5:
                    break
                step = np.concatenate([(a_t > 0.5).astype(np.float64), x_t])
                prev = np.concatenate([prev, step[None]], axis=0)
        adj_arr = np.stack(soft_adj)
        seq = CanonicalSequence(
            adj_arr[:, :M], np.stack(soft_coords), adj_arr[:, M], M
        )
        return from_sequence(seq, 0.5)

    def named_params(self) -> dict[str, ad.Parameter]:
        out = self.encoder.params()
        if self.ca is not None:
            out.update(self.ca.params())
        out.update(self.w_in.params("w_in"))
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"block{i}"))
        out.update(self.heads.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return self.encoder.buffers()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.named_params().values())


class MLPBaseline:
    """One-shot emission of a symmetric soft adjacency matrix and a fixed node grid."""

    def __init__(self, cfg: GGTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(rng, cfg.image_size)
        n = MLP_BASELINE_NODES
        self.n_upper = n * (n - 1) // 2
        self.a1 = Linear(rng, cfg.encoder_out, MLP_BASELINE_HIDDEN)
        self.a2 = Linear(rng, MLP_BASELINE_HIDDEN, self.n_upper)
        self.x1 = Linear(rng, cfg.encoder_out, MLP_BASELINE_HIDDEN)
        self.x2 = Linear(rng, MLP_BASELINE_HIDDEN, n * 2)

    def forward_soft(self, image: np.ndarray, training: bool) -> tuple[ad.Tensor, ad.Tensor]:
        """Soft upper-triangle entries (n_upper,) and coords (10, 2)."""
        code = self.encoder(image[None], training)
        upper = ad.sigmoid(self.a2(ad.relu(self.a1(code))))
        coords = ad.tanh(self.x2(ad.relu(self.x1(code))))
        return ad.reshape(upper, (self.n_upper,)), ad.reshape(coords, (MLP_BASELINE_NODES, 2))

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full symmetric soft adjacency (10, 10) and coords (10, 2)."""
        with ad.no_grad():
            upper, coords = self.forward_soft(image, training=False)
        n = MLP_BASELINE_NODES
        A = np.zeros((n, n))
        iu = np.triu_indices(n, k=1)
        A[iu] = upper.data
        A = A + A.T
        return A, coords.data.copy()

    def generate(self, image: np.ndarray, max_steps: int = 16) -> RoadGraph:
        """Threshold the soft matrix at 0.5 and drop nodes left isolated."""
        A, X = self.predict(image)
        n = MLP_BASELINE_NODES
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if A[i, j] > 0.5]
        keep = sorted({i for e in edges for i in e})
        relabel = {old: new for new, old in enumerate(keep)}
        return RoadGraph(X[keep], [(relabel[i], relabel[j]) for i, j in edges])

    def named_params(self) -> dict[str, ad.Parameter]:
        out = self.encoder.params()
        for name, lin in (("a1", self.a1), ("a2", self.a2), ("x1", self.x1), ("x2", self.x2)):
            out.update(lin.params(f"head.{name}"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return self.encoder.buffers()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.named_params().values())


class RNNBaseline:
    """Single-layer GRU decoder over the step sequence, image code concatenated per step."""

    def __init__(self, cfg: GGTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(rng, cfg.image_size)
        n_in = cfg.input_width
        h = RNN_HIDDEN
        self.wz = Linear(rng, n_in, h)
        self.uz = Linear(rng, h, h, bias=False)
        self.wr = Linear(rng, n_in, h)
        self.ur = Linear(rng, h, h, bias=False)
        self.wn = Linear(rng, n_in, h)
        self.un = Linear(rng, h, h, bias=False)
        self.heads = OutputHeads(rng, h, cfg.head_hidden, cfg.frontier)

    def _gru_states(self, prev_steps: np.ndarray, code: ad.Tensor) -> ad.Tensor:
        T = len(prev_steps)
        states = []
        h = ad.Tensor(np.zeros((1, RNN_HIDDEN)))
        for t in range(T):
            x = ad.concat([ad.Tensor(prev_steps[t : t + 1]), code], axis=1)
            z = ad.sigmoid(self.wz(x) + self.uz(h))
            r = ad.sigmoid(self.wr(x) + self.ur(h))
            n = ad.tanh(self.wn(x) + self.un(ad.mul(r, h)))
            one_minus_z = ad.add(ad.scale(z, -1.0), np.ones((1, RNN_HIDDEN)))
            h = ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))
            states.append(ad.reshape(h, (RNN_HIDDEN,)))
        return ad.stack(states, axis=0)

    def forward_teacher(
        self, image: np.ndarray, seq: CanonicalSequence, training: bool
    ) -> tuple[ad.Tensor, ad.Tensor]:
        code = self.encoder(image[None], training)
        states = self._gru_states(teacher_inputs(seq), code)
        return self.heads(states)

    def generate(self, image: np.ndarray, max_steps: int = 16) -> RoadGraph:
        M = self.cfg.frontier
        with ad.no_grad():
            code = self.encoder(image[None], training=False)
            prev = np.zeros((1, self.cfg.step_width))
            soft_adj, soft_coords = [], []
            for t in range(max_steps):
                states = self._gru_states(prev, code)
                adj, coords = self.heads(states)
                a_t = adj.data[t]
                x_t = coords.data[t]
                soft_adj.append(a_t)
                soft_coords.append(x_t)
                if a_t[M] > 0.5:
                    break
                step = np.concatenate([(a_t > 0.5).astype(np.float64), x_t])
                prev = np.concatenate([prev, step[None]], axis=0)
        adj_arr = np.stack(soft_adj)
        seq = CanonicalSequence(adj_arr[:, :M], np.stack(soft_coords), adj_arr[:, M], M)
        return from_sequence(seq, 0.5)

    def named_params(self) -> dict[str, ad.Parameter]:
        out = self.encoder.params()
        for name, lin in (
            ("wz", self.wz),
            ("uz", self.uz),
            ("wr", self.wr),
            ("ur", self.ur),
            ("wn", self.wn),
            ("un", self.un),
        ):
            out.update(lin.params(f"gru.{name}"))
        out.update(self.heads.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return self.encoder.buffers()

    def n_params(self) -> int:
        return sum(p.data.size for p in self.named_params().values())


MODEL_KINDS = ("ggt", "ggt_no_ca", "mlp", "rnn")


def build_model(kind: str, cfg: GGTConfig, seed: int = 0):
    """Instantiate a model by its kind string; ggt_no_ca disables context attention."""
    if kind == "ggt":
        return GGT(cfg, seed)
    if kind == "ggt_no_ca":
        sub = GGTConfig.from_dict({**cfg.to_dict(), "context_attention": False})
        return GGT(sub, seed)
    if kind == "mlp":
        return MLPBaseline(cfg, seed)
    if kind == "rnn":
        return RNNBaseline(cfg, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def save_model(model, path) -> None:
    named = dict(model.named_params())
    named.update({k: ad.Tensor(v) for k, v in model.buffers().items()})
    ad.save_checkpoint(named, path)


def load_model_weights(model, path) -> None:
    loaded = ad.load_checkpoint(path)
    params = model.named_params()
    buffers = model.buffers()
    missing = (set(params) | set(buffers)) - set(loaded)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    for name, p in params.items():
        if loaded[name].shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {loaded[name].shape} != {p.data.shape}")
        p.data[...] = loaded[name]
    for name, buf in buffers.items():
        buf[...] = loaded[name]
