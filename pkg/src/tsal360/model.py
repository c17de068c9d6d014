"""Text-conditioned viewport saliency network.

Pipeline: project ERP frames to tangent viewports, encode visual/text
features, score text relevance per viewport (cosine), weight the local
features, pool them to tokens, run temporal -> spatial -> text
cross-attention blocks per scale, fuse back into the last frame's local
features, decode per-viewport saliency patches, and blend them onto the
ERP grid.  Every stage that carries trainable weights runs inside the
autodiff graph; encoder features enter as constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geometry, tensorfile
from .encoders import EncoderConfig, FeatureBundle, ToyEncoder
from .tensor import (
    AdamWState,
    Tensor,
    adamw_step,
    add,
    backward,
    bilinear_resize,
    concat,
    conv2d,
    div,
    gather_weighted_sum,
    layer_norm,
    log,
    matmul,
    mul,
    relu,
    reshape,
    select,
    sigmoid,
    softmax,
    tensor,
    tmean,
    transpose,
    trunc_normal,
    tsum,
    pow_scalar,
)

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    viewports: int = 18
    heads: int = 8
    fov_deg: float = 80.0
    patch_res: int = 224                   # tangent input resolution; output patches are /4
    reproject_height: int = 240            # ERP grid the patches blend onto
    output_height: int = 480               # final bilinear-upsampled height
    head: str = "sigmoid"                  # "sigmoid" | "relu"
    attention: str = "vstca"               # "vstca" | "vsta" (no text cross step)
    sim_est: bool = True
    skips: bool = True
    clamp_relevance: bool = False
    mlp_ratio: int = 4
    decoder_widths: tuple[int, ...] = (256, 128, 64, 32)
    loss: str = "kld"                      # "kld" | "kld+cc"
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("sigmoid", "relu"):
            raise ValueError(f"unknown output head {self.head!r}")
        if self.attention not in ("vstca", "vsta"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.loss not in ("kld", "kld+cc"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.patch_res % 32:
            raise ValueError(f"patch_res must be divisible by 32, got {self.patch_res}")
        if len(self.decoder_widths) != 4:
            raise ValueError(f"decoder needs 4 stage widths, got {self.decoder_widths}")

    @property
    def patch_out(self) -> int:
        return self.patch_res // 4

    @property
    def fov(self) -> float:
        return float(np.deg2rad(self.fov_deg))


@dataclass
class TrainingSample:
    """One (frame window, text, ground-truth map) training record."""

    text: str
    gt: np.ndarray                          # (H_gt, W_gt) nonnegative
    frames: np.ndarray | None = None        # (F, C, H, W) in [0, 1]
    bundle: FeatureBundle | None = None     # precomputed features, optional
    key: str | None = None                  # cache key; defaults to dataset index


# ---------------------------------------------------------------------------
# relevance weighting and pooling (feature-side, plain numpy)


def sim_est(global_visual: np.ndarray, global_text: np.ndarray) -> np.ndarray:
    """Cosine relevance of each (frame, viewport) feature to the text, in [-1, 1]."""
    v = np.asarray(global_visual, dtype=np.float64)
    t = np.asarray(global_text, dtype=np.float64).reshape(-1)
    if v.shape[-1] != t.shape[0]:
        raise ValueError(f"feature widths differ: visual {v.shape} vs text {t.shape}")
    vn = np.linalg.norm(v, axis=-1)
    tn = np.linalg.norm(t)
    if tn == 0.0 or np.any(vn == 0.0):
        raise ValueError("cosine relevance undefined for zero-norm feature vectors")
    scores = (v @ t) / (vn * tn)
    return np.clip(scores, -1.0, 1.0).astype(np.float32)


def apply_relevance(
    local_visual: list[np.ndarray], scores: np.ndarray, clamp: bool = False
) -> list[np.ndarray]:
    """Scale every scale's features by the per-(frame, viewport) relevance."""
    s = np.asarray(scores, dtype=np.float32)
    if clamp:
        s = np.maximum(s, 0.0)
    return [lv * s[:, :, None, None, None] for lv in local_visual]


def downsample(local_visual: list[np.ndarray]) -> list[np.ndarray]:
    """Spatial mean per scale: (F, T, C, H, W) -> (F, T, C)."""
    return [lv.mean(axis=(3, 4), dtype=np.float64).astype(np.float32) for lv in local_visual]


# ---------------------------------------------------------------------------
# attention blocks


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class FfnWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class ScaleWeights:
    temporal: AttentionWeights
    spatial: AttentionWeights
    cross: AttentionWeights
    ffn: FfnWeights
    pos_time: Tensor                        # (F, C)
    pos_sphere: Tensor                      # (T, C)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, C) -> (B, heads, N, C/heads)."""
    b, n, c = x.shape
    return transpose(reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _self_attention(x: Tensor, w: AttentionWeights, heads: int) -> Tensor:
    """Multi-head self-attention over axis 1 of (B, N, C)."""
    c = x.shape[-1]
    if c % heads:
        raise ValueError(f"channel width {c} is not divisible by {heads} heads")
    q = _split_heads(matmul(x, w.wq), heads)
    k = _split_heads(matmul(x, w.wk), heads)
    v = _split_heads(matmul(x, w.wv), heads)
    scale = 1.0 / np.sqrt(c // heads)
    attn = softmax(mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale), axis=-1)
    return matmul(_merge_heads(matmul(attn, v)), w.wo)


def _pre_norm(x: Tensor, w) -> Tensor:
    return layer_norm(x, w.ln_gain, w.ln_bias)


def temporal_attention(v_d: Tensor, weights: ScaleWeights, heads: int) -> Tensor:
    """Self-attention across frames, independently per viewport: (F, T, C) -> (F, T, C)."""
    f, t, c = v_d.shape
    x = add(v_d, reshape(weights.pos_time, (f, 1, c)))
    seq = transpose(_pre_norm(x, weights.temporal), (1, 0, 2))      # (T, F, C)
    y = transpose(_self_attention(seq, weights.temporal, heads), (1, 0, 2))
    return add(x, y)


def spatial_attention(z: Tensor, weights: ScaleWeights, heads: int) -> Tensor:
    """Self-attention across viewports, independently per frame: (F, T, C) -> (F, T, C)."""
    f, t, c = z.shape
    x = add(z, reshape(weights.pos_sphere, (1, t, c)))
    y = _self_attention(_pre_norm(x, weights.spatial), weights.spatial, heads)
    return add(x, y)


def cross_attention(z: Tensor, text_tokens: Tensor, weights: ScaleWeights, heads: int) -> Tensor:
    """Visual tokens attend to text tokens: (F, T, C) x (L, C_L) -> (F, T, C)."""
    f, t, c = z.shape
    if c % heads:
        raise ValueError(f"channel width {c} is not divisible by {heads} heads")
    x = reshape(z, (1, f * t, c))
    q = _split_heads(matmul(_pre_norm(x, weights.cross), weights.cross.wq), heads)
    n_tok = text_tokens.shape[0]
    k = _split_heads(reshape(matmul(text_tokens, weights.cross.wk), (1, n_tok, c)), heads)
    v = _split_heads(reshape(matmul(text_tokens, weights.cross.wv), (1, n_tok, c)), heads)
    scale = 1.0 / np.sqrt(c // heads)
    attn = softmax(mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale), axis=-1)
    y = matmul(_merge_heads(matmul(attn, v)), weights.cross.wo)
    return reshape(add(x, y), (f, t, c))


def feed_forward(x: Tensor, w: FfnWeights) -> Tensor:
    h = relu(add(matmul(_pre_norm(x, w), w.w1), w.b1))
    return add(x, add(matmul(h, w.w2), w.b2))


def vstca_block(
    v_d: Tensor, text_tokens: Tensor | None, weights: ScaleWeights, heads: int, use_cross: bool
) -> Tensor:
    """Temporal -> spatial -> (optional cross) -> FFN with residuals throughout."""
    z = temporal_attention(v_d, weights, heads)
    z = spatial_attention(z, weights, heads)
    if use_cross:
        if text_tokens is None:
            raise ValueError("cross-attention requires text tokens")
        z = cross_attention(z, text_tokens, weights, heads)
    return feed_forward(z, weights.ffn)


def residual_fuse_and_retain(z_o: Tensor, local_visual: np.ndarray) -> Tensor:
    """Broadcast block output over space, add the original features, keep the last frame.

    z_o is (F, T, C); local_visual is (F, T, C, H, W).  Returns (T, C, H, W).
    """
    f, t, c = z_o.shape
    if local_visual.shape[:3] != (f, t, c):
        raise ValueError(
            f"block output {z_o.shape} does not match local features {local_visual.shape}"
        )
    last = reshape(select(z_o, f - 1, axis=0), (t, c, 1, 1))
    return add(last, tensor(local_visual[f - 1], dtype=z_o.dtype.type))


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderStage:
    conv_w: Tensor
    conv_b: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class DecoderWeights:
    stages: list[DecoderStage]
    head_w: Tensor
    head_b: Tensor


def _channel_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer norm across the channel axis of (B, C, H, W)."""
    y = layer_norm(transpose(x, (0, 2, 3, 1)), gain, bias)
    return transpose(y, (0, 3, 1, 2))


def decode(
    fused: list[Tensor], weights: DecoderWeights, cfg: ModelConfig
) -> Tensor:
    """Decode three fused scales (T, C_m, H_m, W_m) into (1, P_out, P_out, T).

    Starts from the coarsest scale; the first three stages upsample by two
    (H/32 -> H/4) and, when skips are on, concatenate the matching-scale
    features before their convolution.  The final stage and the output head
    keep the resolution.
    """
    if len(fused) != 3:
        raise ValueError(f"decoder needs 3 scales, got {len(fused)}")
    x = fused[2]
    skip_for_stage = {1: fused[1], 2: fused[0]}
    for i, stage in enumerate(weights.stages):
        if cfg.skips and i in skip_for_stage:
            x = concat([x, skip_for_stage[i]], axis=1)
        x = conv2d(x, stage.conv_w, stage.conv_b)
        x = relu(_channel_norm(x, stage.ln_gain, stage.ln_bias))
        if i < 3:
            h, w = x.shape[-2], x.shape[-1]
            x = bilinear_resize(x, h * 2, w * 2)
    x = conv2d(x, weights.head_w, weights.head_b)
    x = sigmoid(x) if cfg.head == "sigmoid" else relu(x)
    t, _, p, _ = x.shape
    return reshape(transpose(reshape(x, (t, p, p)), (1, 2, 0)), (1, p, p, t))


# ---------------------------------------------------------------------------
# the model


class TextSaliencyModel:
    def __init__(
        self,
        cfg: ModelConfig,
        enc_cfg: EncoderConfig | None = None,
        layout: geometry.ViewportLayout | None = None,
        dtype=np.float32,
    ):
        self.cfg = cfg
        self.enc_cfg = enc_cfg or EncoderConfig(patch_res=cfg.patch_res)
        if self.enc_cfg.patch_res != cfg.patch_res:
            raise ValueError(
                f"encoder patch_res {self.enc_cfg.patch_res} != model patch_res {cfg.patch_res}"
            )
        if any(c % cfg.heads for c in self.enc_cfg.scale_channels):
            raise ValueError(
                f"scale channels {self.enc_cfg.scale_channels} must divide by {cfg.heads} heads"
            )
        self.dtype = np.dtype(dtype).type
        self.layout = layout or geometry.build_layout(cfg.viewports, cfg.fov, cfg.patch_res)
        if self.layout.count != cfg.viewports:
            raise ValueError(f"layout has {self.layout.count} viewports, config wants {cfg.viewports}")
        self.encoder = ToyEncoder(self.enc_cfg)
        self.params: dict[str, Tensor] = {}
        self._init_params()
        self._plan = None
        self._feature_cache: dict[str, FeatureBundle] = {}

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, shape, rng, std=0.02, fill=None) -> Tensor:
        data = (
            np.full(shape, fill, dtype=self.dtype)
            if fill is not None
            else trunc_normal(shape, std, rng, dtype=self.dtype)
        )
        p = Tensor(data, requires_grad=True, name=name)
        self.params[name] = p
        return p

    def _attention_weights(self, prefix, c, key_dim, rng) -> AttentionWeights:
        return AttentionWeights(
            wq=self._param(f"{prefix}.wq", (c, c), rng),
            wk=self._param(f"{prefix}.wk", (key_dim, c), rng),
            wv=self._param(f"{prefix}.wv", (key_dim, c), rng),
            wo=self._param(f"{prefix}.wo", (c, c), rng),
            ln_gain=self._param(f"{prefix}.ln_gain", (c,), rng, fill=1.0),
            ln_bias=self._param(f"{prefix}.ln_bias", (c,), rng, fill=0.0),
        )

    def _init_params(self):
        cfg, enc = self.cfg, self.enc_cfg
        rng = np.random.default_rng(cfg.seed)
        self.scales: list[ScaleWeights] = []
        for m, c in enumerate(enc.scale_channels):
            hidden = cfg.mlp_ratio * c
            self.scales.append(
                ScaleWeights(
                    temporal=self._attention_weights(f"scale{m}.temporal", c, c, rng),
                    spatial=self._attention_weights(f"scale{m}.spatial", c, c, rng),
                    cross=self._attention_weights(f"scale{m}.cross", c, enc.global_dim, rng),
                    ffn=FfnWeights(
                        w1=self._param(f"scale{m}.ffn.w1", (c, hidden), rng),
                        b1=self._param(f"scale{m}.ffn.b1", (hidden,), rng, fill=0.0),
                        w2=self._param(f"scale{m}.ffn.w2", (hidden, c), rng),
                        b2=self._param(f"scale{m}.ffn.b2", (c,), rng, fill=0.0),
                        ln_gain=self._param(f"scale{m}.ffn.ln_gain", (c,), rng, fill=1.0),
                        ln_bias=self._param(f"scale{m}.ffn.ln_bias", (c,), rng, fill=0.0),
                    ),
                    pos_time=self._param(f"scale{m}.pos_time", (cfg.frames, c), rng),
                    pos_sphere=self._param(f"scale{m}.pos_sphere", (cfg.viewports, c), rng),
                )
            )
        widths = cfg.decoder_widths
        chans = enc.scale_channels
        stage_in = [
            chans[2],
            widths[0] + (chans[1] if cfg.skips else 0),
            widths[1] + (chans[0] if cfg.skips else 0),
            widths[2],
        ]
        stages = []
        for i, (cin, cout) in enumerate(zip(stage_in, widths)):
            stages.append(
                DecoderStage(
                    conv_w=self._param(f"decoder.stage{i}.conv_w", (cout, cin, 3, 3), rng),
                    conv_b=self._param(f"decoder.stage{i}.conv_b", (cout,), rng, fill=0.0),
                    ln_gain=self._param(f"decoder.stage{i}.ln_gain", (cout,), rng, fill=1.0),
                    ln_bias=self._param(f"decoder.stage{i}.ln_bias", (cout,), rng, fill=0.0),
                )
            )
        self.decoder = DecoderWeights(
            stages=stages,
            head_w=self._param("decoder.head_w", (1, widths[3], 3, 3), rng),
            head_b=self._param("decoder.head_b", (1,), rng, fill=0.0),
        )

    # -- plumbing -----------------------------------------------------------

    def blend_plan(self) -> geometry.BlendPlan:
        if self._plan is None:
            grid = geometry.ErpGrid(self.cfg.reproject_height, 2 * self.cfg.reproject_height)
            self._plan = geometry.build_blend_plan(self.layout, self.cfg.patch_out, grid)
        return self._plan

    def encode_frames(self, frames: np.ndarray, text: str) -> FeatureBundle:
        seq = geometry.ErpFrameSequence(data=np.asarray(frames, dtype=np.float32))
        stack = geometry.project_to_tangents(seq, self.layout)
        return self.encoder.encode(stack.data, text)

    def _bundle_for(self, sample: TrainingSample, index: int) -> FeatureBundle:
        if sample.bundle is not None:
            return sample.bundle
        key = sample.key or f"sample-{index}"
        if key not in self._feature_cache:
            if sample.frames is None:
                raise ValueError(f"sample {key} has neither frames nor precomputed features")
            self._feature_cache[key] = self.encode_frames(sample.frames, sample.text)
        return self._feature_cache[key]

    # -- forward ------------------------------------------------------------

    def relevance(self, bundle: FeatureBundle) -> np.ndarray:
        if not self.cfg.sim_est:
            return np.ones(bundle.global_visual.shape[:2], dtype=np.float32)
        return sim_est(bundle.global_visual, bundle.global_text)

    def forward_graph(self, bundle: FeatureBundle) -> Tensor:
        """Full differentiable path from features to the output ERP map tensor."""
        cfg = self.cfg
        bundle.validate()
        if bundle.frames != cfg.frames or bundle.viewports != cfg.viewports:
            raise ValueError(
                f"bundle is (F={bundle.frames}, T={bundle.viewports}), "
                f"config wants (F={cfg.frames}, T={cfg.viewports})"
            )
        scores = self.relevance(bundle)
        weighted = apply_relevance(bundle.local_visual, scores, clamp=cfg.clamp_relevance)
        pooled = downsample(weighted)
        text_tokens = (
            tensor(bundle.token_text, dtype=self.dtype) if cfg.attention == "vstca" else None
        )
        fused = []
        for m, scale_w in enumerate(self.scales):
            v_d = tensor(pooled[m], dtype=self.dtype)
            z_o = vstca_block(
                v_d, text_tokens, scale_w, cfg.heads, use_cross=cfg.attention == "vstca"
            )
            fused.append(residual_fuse_and_retain(z_o, bundle.local_visual[m].astype(self.dtype)))
        patches = decode(fused, self.decoder, cfg)                  # (1, P, P, T)
        p = cfg.patch_out
        stack = transpose(reshape(patches, (p, p, cfg.viewports)), (2, 0, 1))
        plan = self.blend_plan()
        blended = reshape(
            gather_weighted_sum(stack, plan.idx, plan.weight, plan.total),
            (plan.grid.height, plan.grid.width),
        )
        return bilinear_resize(blended, cfg.output_height, 2 * cfg.output_height)

    def predict_from_bundle(self, bundle: FeatureBundle) -> np.ndarray:
        out = self.forward_graph(bundle).data
        peak = out.max()
        return (out / peak if peak > 0 else out).astype(np.float32)

    def predict(self, frames: np.ndarray, text: str) -> np.ndarray:
        """ERP saliency map (output_height, 2*output_height) in [0, 1] for the last frame."""
        return self.predict_from_bundle(self.encode_frames(frames, text))

    # -- loss and training --------------------------------------------------

    def loss_graph(self, bundle: FeatureBundle, gt: np.ndarray) -> Tensor:
        pred = self.forward_graph(bundle)
        return saliency_loss(pred, gt, kind=self.cfg.loss)

    def train(
        self,
        dataset: list[TrainingSample],
        epochs: int = 4,
        batch_size: int = 8,
        lr: float = 1e-5,
        weight_decay: float = 0.01,
        seed: int | None = None,
        checkpoint_path=None,
    ) -> list[tuple[int, int, float]]:
        """AdamW training; returns (epoch, step, mean batch loss) log rows.

        Writes a checkpoint to `checkpoint_path` after the final epoch when
        a path is given.
        """
        if not dataset:
            raise ValueError("cannot train on an empty dataset")
        state = AdamWState(lr=lr, weight_decay=weight_decay)
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        rows = []
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(len(dataset))
            epoch_losses = []
            for lo in range(0, len(order), batch_size):
                batch = order[lo : lo + batch_size]
                for p in self.params.values():
                    p.zero_grad()
                batch_loss = 0.0
                for i in batch:
                    sample = dataset[int(i)]
                    loss = self.loss_graph(self._bundle_for(sample, int(i)), sample.gt)
                    backward(loss, grad=np.asarray(1.0 / len(batch)))
                    batch_loss += float(loss.data)
                grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
                adamw_step(self.params, grads, state)
                step += 1
                batch_loss /= len(batch)
                epoch_losses.append(batch_loss)
                rows.append((epoch, step, batch_loss))
            logger.info("epoch %d: mean loss %.6f over %d steps", epoch, float(np.mean(epoch_losses)), len(epoch_losses))
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return rows

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.astype(np.float32) for name, p in self.params.items()}

    def save(self, path) -> None:
        tensorfile.write_checkpoint(path, self.state_dict())

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(tensors))
        extra = sorted(set(tensors) - set(self.params))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, arr in tensors.items():
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.astype(self.dtype)

    @classmethod
    def load(cls, path, cfg: ModelConfig, enc_cfg: EncoderConfig | None = None, **kw):
        m = cls(cfg, enc_cfg, **kw)
        m.load_state(tensorfile.read_checkpoint(path))
        return m


# ---------------------------------------------------------------------------
# losses


def kld_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """KL divergence of the sum-normalized prediction from the ground truth.

    Same convention as metrics.kld: q is the ground truth, eps = 1e-7 floors
    both the denominator and the log argument.
    """
    q = np.asarray(gt, dtype=np.float64)
    if q.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {q.shape} differ")
    qsum = q.sum()
    if qsum <= 0:
        raise ValueError("ground-truth map has no mass")
    q = (q / qsum).astype(pred.dtype.type)
    # the tiny offset keeps an all-zero relu-head prediction finite
    p = div(pred, add(tsum(pred), 1e-12))
    ratio = add(div(tensor(q, dtype=pred.dtype.type), add(p, LOSS_EPS)), LOSS_EPS)
    return tsum(mul(log(ratio), tensor(q, dtype=pred.dtype.type)))


def cc_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """1 - Pearson correlation, differentiable."""
    q = np.asarray(gt, dtype=np.float64)
    q = (q - q.mean()) / (q.std() + 1e-12)
    pc = add(pred, -tmean(pred))
    denom = pow_scalar(add(tmean(mul(pc, pc)), 1e-12), 0.5)
    corr = tmean(mul(div(pc, denom), tensor(q.astype(pred.dtype.type), dtype=pred.dtype.type)))
    return add(mul(corr, -1.0), 1.0)


def saliency_loss(pred: Tensor, gt: np.ndarray, kind: str = "kld") -> Tensor:
    if kind == "kld":
        return kld_loss(pred, gt)
    if kind == "kld+cc":
        return add(kld_loss(pred, gt), cc_loss(pred, gt))
    raise ValueError(f"unknown loss {kind!r}")
