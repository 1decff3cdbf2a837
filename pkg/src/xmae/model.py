"""The cross-reconstruction network: conv stems, patch embedding,
modality encoders, mask-token reinsertion, directional cross-attention
bridge, ECG decoder — plus the symmetric multimodal baseline variant."""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .masking import MaskSpec, expand_to_samples


class ShapeMismatch(ValueError):
    pass


class IndivisibleLength(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 1000
    patch_len: int = 40
    conv_widths: tuple = (32, 64, 128)
    conv_out: int = 32
    conv_kernel: int = 3
    embed_dim: int = 256
    ff_dim: int = 384
    heads: int = 8
    depth_ppg: int = 2
    depth_ecg: int = 1
    depth_bridge: int = 1
    depth_decoder: int = 1
    dropout: float = 0.1

    def __post_init__(self):
        if self.seq_len % self.patch_len != 0:
            raise ValueError("seq_len must be a multiple of patch_len")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))

    @property
    def n_patches(self) -> int:
        return self.seq_len // self.patch_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


# tiny configuration used by gradient checking and fast tests
TINY = ModelConfig(seq_len=80, patch_len=20, conv_widths=(4, 4, 8),
                   conv_out=4, embed_dim=8, ff_dim=12, heads=2,
                   depth_ppg=1, depth_ecg=1, dropout=0.0)


def _trunc_normal(rng, shape, sd=0.02):
    return np.clip(rng.standard_normal(shape) * sd, -2 * sd, 2 * sd)


def _he_normal(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_params(cfg: ModelConfig, objective: str = "xmae", seed: int = 0,
                dtype=np.float32) -> dict:
    """All learnable tensors, keyed by name. Truncated normal (sd 0.02)
    projections, He-scaled conv kernels, zero biases/offsets, unit norm
    scales."""
    rng = np.random.default_rng(seed)
    p = {}

    def tn(name, shape):
        p[name] = _trunc_normal(rng, shape)

    def zeros(name, shape):
        p[name] = np.zeros(shape)

    def ones(name, shape):
        p[name] = np.ones(shape)

    def conv_stem(mod):
        c_in = 1
        for i, width in enumerate(cfg.conv_widths):
            p[f"stem.{mod}.conv{i}.w"] = _he_normal(
                rng, (width, c_in, cfg.conv_kernel))
            zeros(f"stem.{mod}.conv{i}.b", (width,))
            c_in = width
        p[f"stem.{mod}.proj.w"] = _he_normal(rng, (cfg.conv_out, c_in, 1))
        zeros(f"stem.{mod}.proj.b", (cfg.conv_out,))

    def block(prefix, cross=False):
        d = cfg.embed_dim
        ones(f"{prefix}.norm1.g", (d,))
        zeros(f"{prefix}.norm1.b", (d,))
        if cross:
            ones(f"{prefix}.norm_kv.g", (d,))
            zeros(f"{prefix}.norm_kv.b", (d,))
        for w in ("wq", "wk", "wv", "wo"):
            tn(f"{prefix}.attn.{w}", (d, d))
            zeros(f"{prefix}.attn.{w}b", (d,))
        ones(f"{prefix}.norm2.g", (d,))
        zeros(f"{prefix}.norm2.b", (d,))
        tn(f"{prefix}.ff.w1", (d, cfg.ff_dim))
        zeros(f"{prefix}.ff.b1", (cfg.ff_dim,))
        tn(f"{prefix}.ff.w2", (cfg.ff_dim, d))
        zeros(f"{prefix}.ff.b2", (d,))

    flat = cfg.conv_out * cfg.patch_len
    for mod in ("ppg", "ecg"):
        conv_stem(mod)
        tn(f"patch.{mod}.w", (flat, cfg.embed_dim))
        zeros(f"patch.{mod}.b", (cfg.embed_dim,))
        tn(f"pos.{mod}", (cfg.n_patches, cfg.embed_dim))

    if objective == "xmae":
        tn("mask_token", (cfg.embed_dim,))
        for i in range(cfg.depth_ppg):
            block(f"enc.ppg.{i}")
        for i in range(cfg.depth_ecg):
            block(f"enc.ecg.{i}")
        for i in range(cfg.depth_bridge):
            block(f"bridge.{i}", cross=True)
        for i in range(cfg.depth_decoder):
            block(f"dec.{i}")
        tn("head.w", (cfg.embed_dim, cfg.patch_len))
        zeros("head.b", (cfg.patch_len,))
    elif objective == "mm_baseline":
        for mod in ("ppg", "ecg"):
            tn(f"mask_token.{mod}", (cfg.embed_dim,))
            tn(f"modality.{mod}", (cfg.embed_dim,))
        depth_joint = cfg.depth_ppg + cfg.depth_ecg
        for i in range(depth_joint):
            block(f"enc.joint.{i}")
        for mod in ("ppg", "ecg"):
            for i in range(cfg.depth_decoder):
                block(f"dec.{mod}.{i}")
            tn(f"head.{mod}.w", (cfg.embed_dim, cfg.patch_len))
            zeros(f"head.{mod}.b", (cfg.patch_len,))
    else:
        raise ValueError(f"unknown objective {objective!r}")

    return {k: nn.Tensor(v.astype(dtype)) for k, v in p.items()}


def param_count(params: dict) -> int:
    return sum(int(t.data.size) for t in params.values())


def conv_stem(params, cfg: ModelConfig, mod: str, x: nn.Tensor) -> nn.Tensor:
    """(B, 1, L') -> (B, C, L'), temporal resolution preserved."""
    h = x
    for i in range(len(cfg.conv_widths)):
        h = nn.gelu(nn.conv1d_same(h, params[f"stem.{mod}.conv{i}.w"],
                                   params[f"stem.{mod}.conv{i}.b"]))
    return nn.conv1d_same(h, params[f"stem.{mod}.proj.w"],
                          params[f"stem.{mod}.proj.b"])


def patch_embed(params, cfg: ModelConfig, mod: str, fmap: nn.Tensor) -> nn.Tensor:
    """(B, C, L') -> (B, L'/P, d); each patch flattens C*P values."""
    b, c, length = fmap.shape
    if length % cfg.patch_len != 0:
        raise IndivisibleLength(f"length {length} not divisible by patch_len")
    n = length // cfg.patch_len
    h = nn.reshape(fmap, (b, c, n, cfg.patch_len))
    h = nn.transpose(h, (0, 2, 1, 3))
    h = nn.reshape(h, (b, n, c * cfg.patch_len))
    return nn.linear(h, params[f"patch.{mod}.w"], params[f"patch.{mod}.b"])


def _attention(params, prefix, cfg, q_in, kv_in, rng, training):
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    h, dh = cfg.heads, d // cfg.heads

    def split(x, t):
        return nn.transpose(nn.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

    q = split(nn.linear(q_in, params[f"{prefix}.attn.wq"],
                        params[f"{prefix}.attn.wqb"]), tq)
    k = split(nn.linear(kv_in, params[f"{prefix}.attn.wk"],
                        params[f"{prefix}.attn.wkb"]), tk)
    v = split(nn.linear(kv_in, params[f"{prefix}.attn.wv"],
                        params[f"{prefix}.attn.wvb"]), tk)
    scores = nn.scale(nn.bmm(q, nn.transpose(k, (0, 1, 3, 2))),
                      1.0 / np.sqrt(dh))
    att = nn.dropout(nn.softmax(scores), cfg.dropout, rng, training)
    ctx = nn.transpose(nn.bmm(att, v), (0, 2, 1, 3))
    ctx = nn.reshape(ctx, (b, tq, d))
    return nn.linear(ctx, params[f"{prefix}.attn.wo"],
                     params[f"{prefix}.attn.wob"])


def _feed_forward(params, prefix, cfg, x, rng, training):
    h = nn.gelu(nn.linear(x, params[f"{prefix}.ff.w1"],
                          params[f"{prefix}.ff.b1"]))
    h = nn.linear(h, params[f"{prefix}.ff.w2"], params[f"{prefix}.ff.b2"])
    return nn.dropout(h, cfg.dropout, rng, training)


def encoder_block(params, prefix, cfg, x, rng=None, training=False):
    """Pre-norm: x + SelfAttn(norm(x)), then + FF(norm(.))."""
    normed = nn.layer_norm(x, params[f"{prefix}.norm1.g"],
                           params[f"{prefix}.norm1.b"])
    x = nn.add(x, _attention(params, prefix, cfg, normed, normed,
                             rng, training))
    normed = nn.layer_norm(x, params[f"{prefix}.norm2.g"],
                           params[f"{prefix}.norm2.b"])
    return nn.add(x, _feed_forward(params, prefix, cfg, normed, rng, training))


def cross_attention_block(params, prefix, cfg, x_q, x_kv, rng=None,
                          training=False):
    """Queries from x_q, keys/values from x_kv, residual + FF as usual."""
    if x_q.shape[-1] != x_kv.shape[-1]:
        raise ShapeMismatch("query/key dims differ")
    nq = nn.layer_norm(x_q, params[f"{prefix}.norm1.g"],
                       params[f"{prefix}.norm1.b"])
    nkv = nn.layer_norm(x_kv, params[f"{prefix}.norm_kv.g"],
                        params[f"{prefix}.norm_kv.b"])
    x = nn.add(x_q, _attention(params, prefix, cfg, nq, nkv, rng, training))
    normed = nn.layer_norm(x, params[f"{prefix}.norm2.g"],
                           params[f"{prefix}.norm2.b"])
    return nn.add(x, _feed_forward(params, prefix, cfg, normed, rng, training))


def stack_masks(masks: list[MaskSpec]):
    """(vis_idx, masked_idx) int arrays of shape (B, nv) / (B, nm).
    All masks must share the same visible count."""
    vis = np.stack([m.visible_idx for m in masks])
    msk = np.stack([m.masked_idx for m in masks])
    return vis, msk


def _sample_indices(patch_idx, patch_len):
    """Patch indices (B, n) -> sample indices (B, n*patch_len)."""
    b, n = patch_idx.shape
    offs = np.arange(patch_len)
    return (patch_idx[:, :, None] * patch_len + offs).reshape(b, n * patch_len)


def _as_batch(x, dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _encode_ppg_tokens(params, cfg, ppg, rng, training):
    b = ppg.shape[0]
    fmap = conv_stem(params, cfg, "ppg", nn.Tensor(
        ppg.reshape(b, 1, cfg.seq_len), requires_grad=False))
    tokens = nn.add(patch_embed(params, cfg, "ppg", fmap), params["pos.ppg"])
    for i in range(cfg.depth_ppg):
        tokens = encoder_block(params, f"enc.ppg.{i}", cfg, tokens,
                               rng, training)
    return tokens


def forward_xmae(params, cfg: ModelConfig, ppg, ecg, masks,
                 train_mode: bool = False, rng_seed: int = 0):
    """Reconstruct the full ECG timeline from fully visible PPG plus the
    visible ECG patches. Masked ECG samples are never read.

    ppg/ecg: (L,) or (B, L); masks: MaskSpec or list of B MaskSpec.
    Returns (ecg_hat Tensor, loss_mask bool array, aux dict).
    """
    dtype = params["pos.ppg"].data.dtype
    ppg, single = _as_batch(ppg, dtype)
    ecg, _ = _as_batch(ecg, dtype)
    if isinstance(masks, MaskSpec):
        masks = [masks] * ppg.shape[0]
    if ppg.shape[1] != cfg.seq_len or ecg.shape[1] != cfg.seq_len:
        raise ShapeMismatch(f"inputs must have length {cfg.seq_len}")
    rng = np.random.default_rng(rng_seed)
    b, d = ppg.shape[0], cfg.embed_dim
    vis_idx, masked_idx = stack_masks(masks)

    z_ppg = _encode_ppg_tokens(params, cfg, ppg, rng, train_mode)

    # ECG path sees concatenated visible patches only.
    batch = np.arange(b)[:, None]
    ecg_vis = ecg[batch, _sample_indices(vis_idx, cfg.patch_len)]
    fmap = conv_stem(params, cfg, "ecg", nn.Tensor(
        ecg_vis[:, None, :], requires_grad=False))
    tok = patch_embed(params, cfg, "ecg", fmap)
    tok = nn.add(tok, nn.take_param_rows(params["pos.ecg"], vis_idx))
    for i in range(cfg.depth_ecg):
        tok = encoder_block(params, f"enc.ecg.{i}", cfg, tok, rng, train_mode)

    mask_tok = nn.add(nn.take_param_rows(params["pos.ecg"], masked_idx),
                      nn.reshape(params["mask_token"], (1, 1, d)))
    z_tilde = nn.scatter_rows(cfg.n_patches,
                              [(tok, vis_idx), (mask_tok, masked_idx)])

    h = z_tilde
    for i in range(cfg.depth_bridge):
        h = cross_attention_block(params, f"bridge.{i}", cfg, h, z_ppg,
                                  rng, train_mode)
    for i in range(cfg.depth_decoder):
        h = encoder_block(params, f"dec.{i}", cfg, h, rng, train_mode)
    out = nn.linear(h, params["head.w"], params["head.b"])
    ecg_hat = nn.reshape(out, (b, cfg.seq_len))

    loss_mask = np.stack([~expand_to_samples(m, cfg.patch_len) for m in masks])
    if single:
        ecg_hat = nn.reshape(ecg_hat, (cfg.seq_len,))
        loss_mask = loss_mask[0]
    return ecg_hat, loss_mask, {"z_ppg": z_ppg}


def _encode_modality_visible(params, cfg, mod, sig, vis_idx, rng, training):
    b = sig.shape[0]
    batch = np.arange(b)[:, None]
    sig_vis = sig[batch, _sample_indices(vis_idx, cfg.patch_len)]
    fmap = conv_stem(params, cfg, mod, nn.Tensor(sig_vis[:, None, :],
                                                 requires_grad=False))
    tok = patch_embed(params, cfg, mod, fmap)
    tok = nn.add(tok, nn.take_param_rows(params[f"pos.{mod}"], vis_idx))
    return nn.add(tok, nn.reshape(params[f"modality.{mod}"], (1, 1, -1)))


def forward_mm_baseline(params, cfg: ModelConfig, ppg, ecg, masks_p, masks_e,
                        train_mode: bool = False, rng_seed: int = 0):
    """Symmetric baseline: both modalities randomly masked, visible tokens
    jointly encoded, each modality decoded from reinserted mask tokens."""
    dtype = params["pos.ppg"].data.dtype
    ppg, single = _as_batch(ppg, dtype)
    ecg, _ = _as_batch(ecg, dtype)
    if isinstance(masks_p, MaskSpec):
        masks_p = [masks_p] * ppg.shape[0]
    if isinstance(masks_e, MaskSpec):
        masks_e = [masks_e] * ppg.shape[0]
    rng = np.random.default_rng(rng_seed)
    b, d = ppg.shape[0], cfg.embed_dim
    vis_p, msk_p = stack_masks(masks_p)
    vis_e, msk_e = stack_masks(masks_e)
    nv_p, nv_e = vis_p.shape[1], vis_e.shape[1]

    tok_p = _encode_modality_visible(params, cfg, "ppg", ppg, vis_p, rng,
                                     train_mode)
    tok_e = _encode_modality_visible(params, cfg, "ecg", ecg, vis_e, rng,
                                     train_mode)
    idx_p = np.broadcast_to(np.arange(nv_p), (b, nv_p))
    idx_e = np.broadcast_to(nv_p + np.arange(nv_e), (b, nv_e))
    joint = nn.scatter_rows(nv_p + nv_e, [(tok_p, idx_p), (tok_e, idx_e)])
    for i in range(cfg.depth_ppg + cfg.depth_ecg):
        joint = encoder_block(params, f"enc.joint.{i}", cfg, joint, rng,
                              train_mode)
    enc_p = nn.take_rows(joint, idx_p)
    enc_e = nn.take_rows(joint, idx_e)

    outs = {}
    for mod, enc, vis, msk in (("ppg", enc_p, vis_p, msk_p),
                               ("ecg", enc_e, vis_e, msk_e)):
        mask_tok = nn.add(nn.take_param_rows(params[f"pos.{mod}"], msk),
                          nn.reshape(params[f"mask_token.{mod}"], (1, 1, d)))
        full = nn.scatter_rows(cfg.n_patches, [(enc, vis), (mask_tok, msk)])
        for i in range(cfg.depth_decoder):
            full = encoder_block(params, f"dec.{mod}.{i}", cfg, full, rng,
                                 train_mode)
        out = nn.linear(full, params[f"head.{mod}.w"], params[f"head.{mod}.b"])
        outs[mod] = nn.reshape(out, (b, cfg.seq_len))

    lm_p = np.stack([~expand_to_samples(m, cfg.patch_len) for m in masks_p])
    lm_e = np.stack([~expand_to_samples(m, cfg.patch_len) for m in masks_e])
    if single:
        outs = {k: nn.reshape(v, (cfg.seq_len,)) for k, v in outs.items()}
        lm_p, lm_e = lm_p[0], lm_e[0]
    return outs["ppg"], outs["ecg"], lm_p, lm_e


def embed_ppg(params, cfg: ModelConfig, ppg, objective: str = "xmae"):
    """Frozen-encoder embedding: mean over the PPG tokens after the final
    encoder block the PPG stream passes through. Deterministic."""
    ppg, single = _as_batch(ppg, params["pos.ppg"].data.dtype)
    rng = np.random.default_rng(0)
    if objective == "xmae":
        tokens = _encode_ppg_tokens(params, cfg, ppg, rng, False)
    else:
        b = ppg.shape[0]
        vis = np.broadcast_to(np.arange(cfg.n_patches),
                              (b, cfg.n_patches))
        tokens = _encode_modality_visible(params, cfg, "ppg", ppg, vis,
                                          rng, False)
        for i in range(cfg.depth_ppg + cfg.depth_ecg):
            tokens = encoder_block(params, f"enc.joint.{i}", cfg, tokens,
                                   rng, False)
    emb = tokens.data.mean(axis=1)
    return emb[0] if single else emb


# --- checkpoint format -------------------------------------------------
# u32 LE config-JSON length, JSON bytes, then sorted named tensors:
# u16 name length, UTF-8 name, u8 rank, u32 dims, f32 LE data.

def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    blob = bytearray()
    cfg_bytes = json.dumps(meta, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        enc = name.encode()
        blob += struct.pack("<H", len(enc)) + enc
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    (cfg_len,) = struct.unpack_from("<I", raw, 0)
    meta = json.loads(raw[4:4 + cfg_len].decode())
    off = 4 + cfg_len
    tensors = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode()
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count,
                                      offset=off).reshape(dims).copy()
        off += 4 * count
    return meta, tensors


def params_to_arrays(params: dict) -> dict:
    return {k: t.data for k, t in params.items()}


def arrays_to_params(arrays: dict, dtype=np.float32) -> dict:
    return {k: nn.Tensor(v.astype(dtype)) for k, v in arrays.items()}
