"""Frozen transformer backbone with trainable prompt slots.

The backbone is a small pre-LN vision transformer whose weights never
receive gradients.  Three parameter blocks train: a shared prompt block
prepended to the token sequence at the first layer, one set of class
prompt columns mixed into a per-sample token at designated intermediate
layers, and the classification head applied to the final cls token.

Token layout per layer input: [cls, (mixed prompt), shared prompts,
image tokens].  The mixed-prompt token is inserted at the first
configured mixing layer and, by default, replaced with a freshly mixed
token at each later mixing layer so every such layer sees class evidence
computed from its own incoming cls state; a config flag switches to
propagating the first mixture unchanged instead.
"""

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as te
from .errors import ConfigError
from .prototypes import soft_scores_op
from .seeding import derive_rng

INIT_SCALE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    layers: int = 8
    heads: int = 2
    image_size: int = 16
    patch_size: int = 8
    mlp_mult: int = 4
    mix_layers: tuple = (5, 6, 7)
    tau: float = 0.05
    refresh_mix: bool = True
    detach_scores: bool = False

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image size must be a multiple of patch size")
        if any(not 1 <= l <= self.layers for l in self.mix_layers):
            raise ConfigError("mixing layers must lie within [1, layers]")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2

    def without_mixing(self) -> "ModelConfig":
        return replace(self, mix_layers=())


@dataclass
class LayerWeights:
    ln1_gain: te.Tensor
    ln1_bias: te.Tensor
    w_query: te.Tensor
    b_query: te.Tensor
    w_key: te.Tensor
    b_key: te.Tensor
    w_value: te.Tensor
    b_value: te.Tensor
    w_out: te.Tensor
    b_out: te.Tensor
    ln2_gain: te.Tensor
    ln2_bias: te.Tensor
    w_up: te.Tensor
    b_up: te.Tensor
    w_down: te.Tensor
    b_down: te.Tensor

    def raw(self) -> dict:
        """Plain-array view of the frozen weights, cached per block."""
        cached = self.__dict__.get("_raw")
        if cached is None:
            cached = {name: getattr(self, name).data
                      for name in self.__dataclass_fields__}
            self.__dict__["_raw"] = cached
        return cached


@dataclass
class BackboneWeights:
    """Frozen weights; byte-identical across clients and rounds."""

    patch_embed: te.Tensor
    patch_bias: te.Tensor
    cls_embed: te.Tensor
    blocks: list
    final_gain: te.Tensor
    final_bias: te.Tensor

    def arrays(self):
        yield self.patch_embed.data
        yield self.patch_bias.data
        yield self.cls_embed.data
        for blk in self.blocks:
            for name in LayerWeights.__dataclass_fields__:
                yield getattr(blk, name).data
        yield self.final_gain.data
        yield self.final_bias.data

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for arr in self.arrays():
            digest.update(arr.tobytes())
        return digest.hexdigest()


def init_backbone(seed: int, cfg: ModelConfig) -> BackboneWeights:
    """Deterministic fan-in-scaled initialization of a frozen backbone.

    A random frozen network only works as a feature extractor when each
    layer actually mixes token content, so projection weights use the
    standard 1/sqrt(fan_in) scale; a much smaller scale would leave the
    residual stream (and the cls token in particular) carrying almost no
    input signal.
    """
    rng = derive_rng(seed, "backbone")

    def frozen(fan_in, *shape):
        return te.constant(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

    def ones(n):
        return te.constant(np.ones(n))

    def zeros(n):
        return te.constant(np.zeros(n))

    d, hidden = cfg.dim, cfg.dim * cfg.mlp_mult
    blocks = []
    for _ in range(cfg.layers):
        blocks.append(
            LayerWeights(
                ln1_gain=ones(d), ln1_bias=zeros(d),
                w_query=frozen(d, d, d), b_query=zeros(d),
                w_key=frozen(d, d, d), b_key=zeros(d),
                w_value=frozen(d, d, d), b_value=zeros(d),
                w_out=frozen(d, d, d), b_out=zeros(d),
                ln2_gain=ones(d), ln2_bias=zeros(d),
                w_up=frozen(d, d, hidden), b_up=zeros(hidden),
                w_down=frozen(hidden, hidden, d), b_down=zeros(d),
            )
        )
    return BackboneWeights(
        patch_embed=frozen(cfg.patch_dim, cfg.patch_dim, d),
        patch_bias=zeros(d),
        cls_embed=te.constant(rng.normal(0.0, 1.0, size=d)),
        blocks=blocks,
        final_gain=ones(d),
        final_bias=zeros(d),
    )


@dataclass
class PromptParams:
    """The only trainable blocks: shared prompts, class prompts, head."""

    shared: te.Tensor       # (dim, n_shared)
    class_prompts: te.Tensor  # (dim, classes)
    head: te.Tensor         # (classes, dim)

    @classmethod
    def init(cls, seed: int, dim: int, classes: int, n_shared: int) -> "PromptParams":
        rng = derive_rng(seed, "prompt-init")
        return cls(
            shared=te.parameter(rng.normal(0.0, INIT_SCALE, size=(dim, n_shared))),
            class_prompts=te.parameter(rng.normal(0.0, INIT_SCALE, size=(dim, classes))),
            head=te.parameter(np.zeros((classes, dim))),
        )

    @classmethod
    def from_arrays(cls, shared, class_prompts, head) -> "PromptParams":
        return cls(
            shared=te.parameter(np.array(shared, dtype=np.float64)),
            class_prompts=te.parameter(np.array(class_prompts, dtype=np.float64)),
            head=te.parameter(np.array(head, dtype=np.float64)),
        )

    def copy(self) -> "PromptParams":
        return PromptParams.from_arrays(
            self.shared.data, self.class_prompts.data, self.head.data
        )

    def blocks(self):
        return (("shared", self.shared), ("class", self.class_prompts),
                ("head", self.head))

    def zero_grad(self):
        for _, block in self.blocks():
            block.zero_grad()

    @property
    def num_classes(self) -> int:
        return self.head.data.shape[0]


@dataclass
class ForwardTrace:
    """Input-side cls tokens per layer, score vectors, and final logits."""

    cls_inputs: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)
    final_cls: np.ndarray | None = None
    logits: np.ndarray | None = None

    def cls_input(self, layer: int) -> np.ndarray:
        """cls token entering layer `layer` (1-indexed)."""
        return self.cls_inputs[layer - 1]


def patchify(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Split an image into row-major patches, each flattened to a row."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"expected {cfg.image_size}x{cfg.image_size} image, got {image.shape}"
        )
    p = cfg.patch_size
    n = cfg.image_size // p
    rows = []
    for i in range(n):
        for j in range(n):
            rows.append(image[i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1))
    return np.stack(rows)


_GELU_C = np.sqrt(2.0 / np.pi)


def _norm_rows(x, gain, bias):
    d = x.shape[-1]
    mean = x.sum(axis=-1, keepdims=True) / d
    centered = x - mean
    inv = 1.0 / np.sqrt((centered * centered).sum(axis=-1, keepdims=True) / d
                        + te.LAYER_NORM_EPS)
    xhat = centered * inv
    return xhat * gain + bias, xhat, inv


def _norm_rows_backward(dy, xhat, inv, gain):
    d = xhat.shape[-1]
    gx = dy * gain
    return inv * (
        gx
        - gx.sum(axis=-1, keepdims=True) / d
        - xhat * ((gx * xhat).sum(axis=-1, keepdims=True) / d)
    )


def _split_heads(m, heads):
    tokens, d = m.shape
    return m.reshape(tokens, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(m):
    heads, tokens, head_dim = m.shape
    return m.transpose(1, 0, 2).reshape(tokens, heads * head_dim)


def _transformer_layer(x: te.Tensor, blk: LayerWeights, heads: int) -> te.Tensor:
    """One pre-LN block as a single fused primitive.

    The backbone is frozen, so backward only has to produce the gradient
    with respect to the incoming token matrix; deriving it by hand keeps
    the per-sample step two orders of magnitude cheaper than composing
    the generic ops, and the finite-difference suite checks it end to
    end.
    """
    w = blk.raw()
    xv = x.data
    inv_sqrt = 1.0 / np.sqrt(xv.shape[1] // heads)

    h1, xhat1, inv1 = _norm_rows(xv, w["ln1_gain"], w["ln1_bias"])
    q = _split_heads(h1 @ w["w_query"] + w["b_query"], heads)
    k = _split_heads(h1 @ w["w_key"] + w["b_key"], heads)
    v = _split_heads(h1 @ w["w_value"] + w["b_value"], heads)
    scores = q @ k.transpose(0, 2, 1) * inv_sqrt
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    x1 = xv + _merge_heads(attn @ v) @ w["w_out"] + w["b_out"]

    h2, xhat2, inv2 = _norm_rows(x1, w["ln2_gain"], w["ln2_bias"])
    u = h2 @ w["w_up"] + w["b_up"]
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    x2 = x1 + (0.5 * u * (1.0 + t)) @ w["w_down"] + w["b_down"]

    out = te.Tensor(x2, requires_grad=te.active_tape() is not None
                    and x.requires_grad)
    if not out.requires_grad:
        return out

    def backward():
        dout = out.grad
        # MLP branch
        dgelu = dout @ w["w_down"].T
        du = dgelu * (0.5 * (1.0 + t)
                      + 0.5 * u * (1.0 - t**2)
                      * _GELU_C * (1.0 + 3 * 0.044715 * u**2))
        dx1 = dout + _norm_rows_backward(du @ w["w_up"].T, xhat2, inv2,
                                         w["ln2_gain"])
        # attention branch
        do_heads = _split_heads(dx1 @ w["w_out"].T, heads)
        dattn = do_heads @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ do_heads
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= inv_sqrt
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q
        dh1 = (_merge_heads(dq) @ w["w_query"].T
               + _merge_heads(dk) @ w["w_key"].T
               + _merge_heads(dv) @ w["w_value"].T)
        x.grad += dx1 + _norm_rows_backward(dh1, xhat1, inv1, w["ln1_gain"])

    te.record(out, backward)
    return out


def forward_with_prompts(image, prompts: PromptParams, backbone: BackboneWeights,
                         cfg: ModelConfig, bank=None, priors=None):
    """Run one sample through the prompted frozen backbone.

    Returns (logits Tensor, ForwardTrace).  With mixing layers configured
    the prototype bank must cover each of them and `priors` must be that
    client's class prior vector; gradients then flow through the score
    computation into upstream activations and into the class prompts,
    while prototypes stay constant.
    """
    if cfg.mix_layers:
        if bank is None:
            raise ConfigError("mixing layers configured but no prototype bank given")
        if priors is None:
            raise ConfigError("mixing layers configured but no class priors given")
        missing = [l for l in cfg.mix_layers if l not in bank.mu]
        if missing:
            raise ConfigError(f"prototype bank missing layers {missing}")

    trace = ForwardTrace()
    rows = [te.constant(backbone.cls_embed.data[None, :])]
    if prompts.shared.data.shape[1] > 0:
        rows.append(te.transpose(prompts.shared))
    tokens = patchify(image, cfg) @ backbone.patch_embed.data + backbone.patch_bias.data
    rows.append(te.constant(tokens))
    seq = te.concat_rows(rows)

    mix_inserted = False
    for layer in range(1, cfg.layers + 1):
        trace.cls_inputs.append(seq.data[0].copy())
        if layer in cfg.mix_layers and (not mix_inserted or cfg.refresh_mix):
            cls_col = te.transpose(te.slice_rows(seq, 0, 1))
            scores = soft_scores_op(
                cls_col, bank.mu[layer], priors, cfg.tau,
                detach=cfg.detach_scores,
            )
            trace.scores[layer] = scores.data.reshape(-1).copy()
            mixed = te.transpose(te.matmul(prompts.class_prompts, scores))
            head_row = te.slice_rows(seq, 0, 1)
            if not mix_inserted:
                rest = te.slice_rows(seq, 1, seq.data.shape[0])
                mix_inserted = True
            else:
                rest = te.slice_rows(seq, 2, seq.data.shape[0])
            seq = te.concat_rows([head_row, mixed, rest])
        seq = _transformer_layer(seq, backbone.blocks[layer - 1], cfg.heads)

    cls_row = te.layer_norm(te.slice_rows(seq, 0, 1),
                            backbone.final_gain, backbone.final_bias)
    cls_final = te.transpose(cls_row)
    logits = te.matmul(prompts.head, cls_final)
    trace.final_cls = cls_final.data.reshape(-1).copy()
    trace.logits = logits.data.reshape(-1).copy()
    return logits, trace


def predict(logits) -> int:
    """Argmax class index; ties break toward the lowest index."""
    values = logits.data if isinstance(logits, te.Tensor) else np.asarray(logits)
    return int(np.argmax(values.reshape(-1)))


def gradient_check(seed: int = 0, dim: int = 16, layers: int = 4, classes: int = 4,
                   heads: int = 2, n_shared: int = 1, mix_layers=None,
                   image_size: int = 16, patch_size: int = 8,
                   h: float = 1e-5) -> dict:
    """Compare tape gradients of the trainable blocks against central
    finite differences on a randomly initialized prompted model.

    Returns {"shared": err, "class": err, "head": err, "max": err}.
    """
    from .prototypes import PrototypeBank  # local import to avoid cycle noise

    if mix_layers is None:
        mid = max(1, layers // 2)
        mix_layers = tuple(sorted({mid, min(layers, mid + 1)}))
    cfg = ModelConfig(dim=dim, layers=layers, heads=heads, image_size=image_size,
                      patch_size=patch_size, mix_layers=tuple(mix_layers))
    rng = derive_rng(seed, "gradcheck")
    backbone = init_backbone(seed, cfg)
    prompts = PromptParams.init(seed, dim, classes, n_shared)
    prompts.head.data[...] = rng.normal(0.0, 0.5, size=prompts.head.data.shape)
    bank = PrototypeBank(layers=tuple(mix_layers), num_classes=classes, dim=dim)
    for l in mix_layers:
        bank.mu[l] = rng.normal(size=(classes, dim))
    priors = rng.random(classes)
    priors /= priors.sum()
    image = rng.normal(size=(image_size, image_size))
    label = int(rng.integers(classes))

    prompts.zero_grad()
    with te.Tape() as tape:
        logits, _ = forward_with_prompts(image, prompts, backbone, cfg,
                                         bank=bank, priors=priors)
        loss = te.cross_entropy(logits, label)
    tape.backward(loss)

    def loss_at(shared, class_prompts, head):
        probe = PromptParams.from_arrays(shared, class_prompts, head)
        logits, _ = forward_with_prompts(image, probe, backbone, cfg,
                                         bank=bank, priors=priors)
        return float(te.cross_entropy(logits, label).data)

    base = {name: block.data.copy() for name, block in prompts.blocks()}
    report = {}
    for name, block in prompts.blocks():
        def f(x, name=name):
            args = dict(base)
            args[name] = x
            return loss_at(args["shared"], args["class"], args["head"])

        oracle = te.finite_diff_grad(f, base[name], h=h)
        report[name] = te.grad_rel_error(block.grad, oracle)
    report["max"] = max(report.values())
    return report
