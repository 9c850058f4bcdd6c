"""Multi-scale encoder/decoder segmentation model, offline and causal.

One encoder stage turns projected frame features into initial per-frame
class logits; each decoder stage consumes the softmax of the previous
stage's logits plus the encoder's final hidden state (cross-attention) and
emits refined logits. Every block runs one dilated-conv feed-forward per
scale kernel, attends within that scale's window, and fuses the branches:

    fused = h_base + alpha * sum_j mix_j * attn_j

with h_base the kernel-3 branch, mix_j learned scalars, and alpha 1 in the
encoder and first decoder, then decaying by alpha_base per decoder.

Causal models use causal convolutions and windows and carry no temporal
normalization, so logits at time t never depend on frames after t; that is
what makes the streaming pass exact.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import WindowSpec, sliding_window_attention
from .errors import ConfigError, ModeError, ShapeError
from .numerics import Parameter, Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    kernels: tuple[int, ...] = (3, 5, 17)
    layers_per_stage: int = 10
    feature_maps: int = 64
    num_decoders: int = 3
    causal: bool = False
    dropout: float = 0.5
    alpha_base: float = 2.0

    def violations(self) -> list[str]:
        problems = []
        if self.input_dim < 1:
            problems.append(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        ks = tuple(self.kernels)
        if not ks:
            problems.append("kernels must be nonempty")
        else:
            if ks[0] != 3:
                problems.append(f"kernels[0] must be 3 (base scale), got {ks[0]}")
            if any(k < 3 for k in ks):
                problems.append(f"kernels must all be >= 3, got {ks}")
            if any(b <= a for a, b in zip(ks, ks[1:])):
                problems.append(f"kernels must be strictly increasing, got {ks}")
            if not self.causal and any(k % 2 == 0 for k in ks):
                problems.append(f"acausal models need odd kernels (symmetric conv), got {ks}")
        if self.layers_per_stage < 1:
            problems.append(f"layers_per_stage must be >= 1, got {self.layers_per_stage}")
        if self.feature_maps < 1:
            problems.append(f"feature_maps must be >= 1, got {self.feature_maps}")
        if self.num_decoders < 1:
            problems.append(f"num_decoders must be >= 1, got {self.num_decoders}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.alpha_base > 0:
            problems.append(f"alpha_base must be > 0, got {self.alpha_base}")
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))


@dataclass
class ScaleBranchParams:
    """One temporal scale inside a block: conv feed-forward, Q/K/V, fusion weight."""

    conv_w: Parameter   # (K, C, C)
    conv_b: Parameter   # (C,)
    wq: Parameter       # (C, C) encoder; (2C, C) decoder
    wk: Parameter
    wv: Parameter       # (C, C)
    mix: Parameter      # scalar fusion weight


@dataclass
class BlockParams:
    branches: list[ScaleBranchParams]
    out_w: Parameter            # (C, C) 1x1 projection
    out_b: Parameter            # (C,)
    norm_gain: Parameter | None  # acausal only
    norm_bias: Parameter | None


@dataclass
class StageParams:
    in_w: Parameter     # (Din, C)
    in_b: Parameter     # (C,)
    blocks: list[BlockParams]
    head_w: Parameter   # (C, num_classes)
    head_b: Parameter   # (num_classes,)


@dataclass
class Model:
    cfg: ModelConfig
    encoder: StageParams
    decoders: list[StageParams]
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def parameters(self) -> list[Parameter]:
        out = []

        def stage(s: StageParams):
            out.extend([s.in_w, s.in_b])
            for blk in s.blocks:
                for br in blk.branches:
                    out.extend([br.conv_w, br.conv_b, br.wq, br.wk, br.wv, br.mix])
                out.extend([blk.out_w, blk.out_b])
                if blk.norm_gain is not None:
                    out.extend([blk.norm_gain, blk.norm_bias])
            out.extend([s.head_w, s.head_b])

        stage(self.encoder)
        for dec in self.decoders:
            stage(dec)
        return out

    def param_by_name(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


@dataclass
class StageOutputs:
    """Per-stage T x num_classes logits, encoder first."""

    logits: list[Tensor]

    def __len__(self) -> int:
        return len(self.logits)

    def final(self) -> np.ndarray:
        return self.logits[-1].data


class StreamState:
    """Frame buffer for online inference; owned by a single consumer."""

    def __init__(self):
        self._frames: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._frames)

    def append(self, frame: np.ndarray):
        self._frames.append(frame)

    def prefix(self) -> np.ndarray:
        return np.concatenate(self._frames, axis=0)

    def reset(self):
        self._frames.clear()


def alpha_schedule(decoder_index: int, alpha_base: float) -> float:
    """Attention weight for the d-th decoder (1-based): 1, then 1/base, 1/base^2, ..."""
    if decoder_index < 1:
        raise ConfigError(f"decoder_index must be >= 1, got {decoder_index}")
    return float(alpha_base) ** (-(decoder_index - 1))


def multiscale_fuse(h_base: Tensor, attn_outs, weights, alpha: float) -> Tensor:
    """h_base + alpha * sum_j weights[j] * attn_outs[j], elementwise."""
    attn_outs = list(attn_outs)
    weights = list(weights)
    if len(attn_outs) != len(weights):
        raise ShapeError(f"{len(attn_outs)} attention branches but {len(weights)} fusion weights")
    out = h_base
    for w_j, a_j in zip(weights, attn_outs):
        term = nx.mul(w_j, a_j)
        if alpha != 1.0:
            term = nx.scale(term, alpha)
        out = nx.add(out, term)
    return out


def _block_forward(x: Tensor, enc_out: Tensor | None, params: BlockParams, layer: int,
                   alpha: float, cfg: ModelConfig, rng, training: bool) -> Tensor:
    dilation = 1 << (layer - 1)
    mode = "causal" if cfg.causal else "symmetric"
    attn_outs = []
    h_base = None
    for kernel, br in zip(cfg.kernels, params.branches):
        h = nx.relu(nx.dilated_conv1d(x, br.conv_w, br.conv_b, dilation, mode))
        if h_base is None:
            h_base = h
        n = h if cfg.causal else nx.temporal_norm(h, params.norm_gain, params.norm_bias)
        qk_src = n if enc_out is None else nx.concat_channels(n, enc_out)
        q = nx.matmul(qk_src, br.wq)
        k = nx.matmul(qk_src, br.wk)
        v = nx.matmul(n, br.wv)
        spec = WindowSpec.from_schedule(kernel, layer, cfg.causal)
        attn_outs.append(sliding_window_attention(q, k, v, spec))
    fused = multiscale_fuse(h_base, attn_outs, [br.mix for br in params.branches], alpha)
    proj = nx.add(nx.matmul(fused, params.out_w), params.out_b)
    dropped, _ = nx.dropout(proj, cfg.dropout, rng, training)
    return nx.add(x, dropped)


def encoder_block_forward(x: Tensor, params: BlockParams, layer: int, cfg: ModelConfig,
                          rng=None, training: bool = False) -> Tensor:
    """Self-attention block: Q, K, V all from the (normalized) conv branch."""
    return _block_forward(x, None, params, layer, 1.0, cfg, rng, training)


def decoder_block_forward(x: Tensor, enc_out: Tensor, params: BlockParams, layer: int,
                          alpha: float, cfg: ModelConfig, rng=None,
                          training: bool = False) -> Tensor:
    """Cross-attention block: Q and K read [branch | encoder output], V the branch only."""
    if enc_out.data.shape != x.data.shape:
        raise ShapeError(f"encoder output {enc_out.data.shape} does not match block input {x.data.shape}")
    return _block_forward(x, enc_out, params, layer, alpha, cfg, rng, training)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministic initialization: weights uniform in +-sqrt(1/fan_in),
    biases zero, fusion weights 1, norm gain 1 / bias 0."""
    cfg.validate()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    C = cfg.feature_maps

    def weight(name, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name)

    def zeros(name, shape):
        return Parameter(np.zeros(shape, dtype=dtype), name)

    def ones(name, shape):
        return Parameter(np.ones(shape, dtype=dtype), name)

    def stage(prefix: str, in_dim: int, cross: bool) -> StageParams:
        in_w = weight(f"{prefix}.in.w", (in_dim, C), in_dim)
        in_b = zeros(f"{prefix}.in.b", (C,))
        blocks = []
        qk_dim = 2 * C if cross else C
        for i in range(cfg.layers_per_stage):
            b = f"{prefix}.b{i}"
            branches = []
            for k in cfg.kernels:
                s = f"{b}.k{k}"
                branches.append(ScaleBranchParams(
                    conv_w=weight(f"{s}.conv.w", (k, C, C), k * C),
                    conv_b=zeros(f"{s}.conv.b", (C,)),
                    wq=weight(f"{s}.wq", (qk_dim, C), qk_dim),
                    wk=weight(f"{s}.wk", (qk_dim, C), qk_dim),
                    wv=weight(f"{s}.wv", (C, C), C),
                    mix=ones(f"{s}.mix", ()),
                ))
            blocks.append(BlockParams(
                branches=branches,
                out_w=weight(f"{b}.out.w", (C, C), C),
                out_b=zeros(f"{b}.out.b", (C,)),
                norm_gain=None if cfg.causal else ones(f"{b}.norm.g", (C,)),
                norm_bias=None if cfg.causal else zeros(f"{b}.norm.b", (C,)),
            ))
        head_w = weight(f"{prefix}.head.w", (C, cfg.num_classes), C)
        head_b = zeros(f"{prefix}.head.b", (cfg.num_classes,))
        return StageParams(in_w, in_b, blocks, head_w, head_b)

    encoder = stage("enc", cfg.input_dim, cross=False)
    decoders = [stage(f"dec{d}", cfg.num_classes, cross=True)
                for d in range(1, cfg.num_decoders + 1)]
    return Model(cfg=cfg, encoder=encoder, decoders=decoders, dtype=dtype)


def _run_stage(h: Tensor, stage: StageParams, cfg: ModelConfig, enc_hidden: Tensor | None,
               alpha: float, rng, training: bool) -> tuple[Tensor, Tensor]:
    """Returns (final hidden state, logits) for one stage."""
    for layer in range(1, cfg.layers_per_stage + 1):
        blk = stage.blocks[layer - 1]
        if enc_hidden is None:
            h = encoder_block_forward(h, blk, layer, cfg, rng, training)
        else:
            h = decoder_block_forward(h, enc_hidden, blk, layer, alpha, cfg, rng, training)
    logits = nx.add(nx.matmul(h, stage.head_w), stage.head_b)
    return h, logits


def forward_full(model: Model, features: np.ndarray, mode: str = "infer",
                 rng=None) -> StageOutputs:
    """Run all stages over a full feature sequence.

    mode "train" keeps the tape and applies dropout (rng required when
    dropout > 0); mode "infer" is deterministic and tape-free.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.cfg
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != cfg.input_dim:
        raise ShapeError(f"features shape {features.shape} does not match input_dim {cfg.input_dim}")
    T = features.shape[0]
    if T < 1 or (not cfg.causal and T < 2):
        raise ShapeError(f"sequence too short for this model: T={T}, causal={cfg.causal}")
    training = mode == "train"
    if training and cfg.dropout > 0 and rng is None:
        raise ConfigError("training forward with dropout > 0 needs an rng")

    def run():
        x = nx.as_tensor(features.astype(model.dtype, copy=False))
        h = nx.add(nx.matmul(x, model.encoder.in_w), model.encoder.in_b)
        enc_hidden, logits = _run_stage(h, model.encoder, cfg, None, 1.0, rng, training)
        stages = [logits]
        for d, dec in enumerate(model.decoders, start=1):
            alpha = alpha_schedule(d, cfg.alpha_base)
            inp = nx.softmax_rows(stages[-1])
            h = nx.add(nx.matmul(inp, dec.in_w), dec.in_b)
            _, logits = _run_stage(h, dec, cfg, enc_hidden, alpha, rng, training)
            stages.append(logits)
        return StageOutputs(stages)

    if training:
        return run()
    with no_grad():
        return run()


def forward_stream(model: Model, next_feature_frame: np.ndarray, state: StreamState) -> np.ndarray:
    """Append one frame and return the final-stage logits for it (1 x num_classes).

    Reference semantics: recompute over the stored prefix; causality makes
    the newest row equal to the same row of a full-sequence pass.
    """
    if not model.cfg.causal:
        raise ModeError("streaming requires a causal model")
    frame = np.asarray(next_feature_frame)
    if frame.ndim == 1:
        frame = frame[None, :]
    if frame.shape != (1, model.cfg.input_dim):
        raise ShapeError(f"stream frame shape {frame.shape}, expected (1, {model.cfg.input_dim})")
    state.append(frame.astype(model.dtype, copy=True))
    outputs = forward_full(model, state.prefix(), mode="infer")
    return outputs.final()[-1:].copy()


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    """Per-frame argmax of the final-stage softmax; ties go to the smaller class id."""
    outputs = forward_full(model, features, mode="infer")
    with no_grad():
        probs = nx.softmax_rows(outputs.logits[-1]).data
    return probs.argmax(axis=1).astype(np.int64)
